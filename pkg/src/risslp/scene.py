"""System constants, channel synthesis and symbol generation.

Everything in this module is plain numpy. Channel realizations are
returned as :class:`ChannelSet` instances whose fields may be stacked
along a leading batch axis with :meth:`ChannelSet.stack`.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LINKS = ("bs_ris", "ris_target", "ris_user", "bs_target", "bs_user")


@dataclass
class PathLoss:
    """Distance law ``P(d) = C0 (d0/d)^rho`` with a per-link exponent."""

    C0_dB: float = -30.0
    d0: float = 1.0
    rho: dict = field(
        default_factory=lambda: {
            "bs_ris": 2.3,
            "ris_target": 2.3,
            "ris_user": 2.5,
            "bs_target": 2.8,
            "bs_user": 3.0,
        }
    )


def pathloss_amplitude(d: float, link: str, pathloss: PathLoss | None = None) -> float:
    """Amplitude ``sqrt(C0 (d0/d)^rho_link)`` of a link at distance ``d`` (m)."""
    if not d > 0:
        raise ValueError(f"link distance must be positive, got {d}")
    pl = pathloss or PathLoss()
    if link not in pl.rho:
        raise ValueError(f"unknown link {link!r}; expected one of {LINKS}")
    c0 = 10.0 ** (pl.C0_dB / 10.0)
    return math.sqrt(c0 * (pl.d0 / d) ** pl.rho[link])


def steering(theta: float, count: int) -> np.ndarray:
    """Half-wavelength ULA response, entry m is ``exp(j pi m sin(theta))``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return np.exp(1j * np.pi * np.arange(count) * np.sin(theta))


def _as_tuple(value, n: int, name: str) -> tuple:
    if np.isscalar(value):
        return (float(value),) * n
    value = tuple(float(v) for v in value)
    if len(value) == 1 and n > 1:
        value = value * n
    if len(value) != n:
        raise ValueError(f"{name} must have length {n}, got {len(value)}")
    return value


@dataclass
class SceneConfig:
    """Scalar system parameters.

    Powers and variances are in watts, angles in radians, SNR targets
    linear. Per-user and per-clutter fields accept a scalar, which is
    broadcast to length ``K`` or ``Q``.
    """

    M: int = 6
    N: int = 64
    K: int = 3
    L: int = 20
    Q: int = 3
    P: float = 100.0
    Omega: int = 4
    Gamma_k: Sequence[float] | float = 10.0
    sigma2_k: Sequence[float] | float = 1e-11
    xi2_0: float = 1.0
    xi2_q: Sequence[float] | float = 1.0
    xi2_z: float = 1e-11
    theta_0: float = 0.0
    theta_RIS: float = math.radians(30.0)
    theta_q: Sequence[float] = (math.radians(-60.0), math.radians(-20.0), math.radians(45.0))
    # clutter angles seen from the RIS; defaults to theta_q
    theta_q_ris: Sequence[float] | None = None
    d_q: Sequence[int] = (0, 1, 2)
    pathloss: PathLoss = field(default_factory=PathLoss)
    # link distances in metres
    dist_bs_ris: float = 30.0
    dist_ris_target: float = 20.0
    dist_bs_target: float = 45.0
    dist_bs_user: Sequence[float] | None = None
    dist_ris_user: Sequence[float] | None = None
    dist_bs_clutter: Sequence[float] | float | None = None
    dist_ris_clutter: Sequence[float] | float | None = None
    # BS-RIS line-of-sight bearings (departure at BS, arrival at RIS)
    theta_bs_ris: float = math.radians(40.0)
    theta_ris_bs: float = math.radians(-35.0)
    rician_dB: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.M, self.N, self.K, self.L, self.Q = (int(v) for v in (self.M, self.N, self.K, self.L, self.Q))
        self.Omega = int(self.Omega)
        self.Gamma_k = _as_tuple(self.Gamma_k, self.K, "Gamma_k")
        self.sigma2_k = _as_tuple(self.sigma2_k, self.K, "sigma2_k")
        self.xi2_q = _as_tuple(self.xi2_q, self.Q, "xi2_q")
        self.theta_q = _as_tuple(self.theta_q, self.Q, "theta_q")
        self.theta_q_ris = _as_tuple(
            self.theta_q if self.theta_q_ris is None else self.theta_q_ris, self.Q, "theta_q_ris"
        )
        self.d_q = tuple(int(d) for d in _as_tuple(self.d_q, self.Q, "d_q"))
        if self.dist_bs_user is None:
            self.dist_bs_user = tuple(np.linspace(40.0, 60.0, self.K)) if self.K > 1 else (50.0,)
        if self.dist_ris_user is None:
            self.dist_ris_user = tuple(np.linspace(20.0, 30.0, self.K)) if self.K > 1 else (25.0,)
        self.dist_bs_user = _as_tuple(self.dist_bs_user, self.K, "dist_bs_user")
        self.dist_ris_user = _as_tuple(self.dist_ris_user, self.K, "dist_ris_user")
        self.dist_bs_clutter = _as_tuple(
            self.dist_bs_target if self.dist_bs_clutter is None else self.dist_bs_clutter,
            self.Q,
            "dist_bs_clutter",
        )
        self.dist_ris_clutter = _as_tuple(
            self.dist_ris_target if self.dist_ris_clutter is None else self.dist_ris_clutter,
            self.Q,
            "dist_ris_clutter",
        )
        if isinstance(self.pathloss, dict):
            self.pathloss = PathLoss(**self.pathloss)
        self.validate()

    def validate(self):
        for name in ("M", "N", "K", "L"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.Q < 0:
            raise ValueError("Q must be >= 0")
        if self.Omega < 2 or self.Omega & (self.Omega - 1):
            raise ValueError("Omega must be a power of two >= 2")
        if any(not 0 <= d <= self.L for d in self.d_q):
            raise ValueError("clutter range bins must satisfy 0 <= d_q <= L")
        positives = [self.P, self.xi2_0, self.xi2_z, *self.sigma2_k, *self.xi2_q, *self.Gamma_k]
        if any(not v > 0 for v in positives):
            raise ValueError("powers, variances and SNR targets must be positive")

    # derived quantities
    @property
    def Theta(self) -> float:
        return math.pi / self.Omega

    @property
    def amp(self) -> float:
        """Per-entry transmit modulus ``sqrt(P/M)``."""
        return math.sqrt(self.P / self.M)

    @property
    def gamma(self) -> np.ndarray:
        """Per-user CI threshold ``sigma_k sqrt(Gamma_k) sin(Theta)``."""
        return np.sqrt(np.asarray(self.sigma2_k) * np.asarray(self.Gamma_k)) * math.sin(self.Theta)

    def replace(self, **changes) -> "SceneConfig":
        """Copy with ``changes``; per-user/per-clutter fields re-broadcast when K or Q change."""
        data = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        if "K" in changes and changes["K"] != self.K:
            for key in ("Gamma_k", "sigma2_k"):
                data[key] = data[key][0]
            data["dist_bs_user"] = data["dist_ris_user"] = None
        if "Q" in changes and changes["Q"] != self.Q:
            q = changes["Q"]
            for key in ("theta_q", "theta_q_ris", "d_q", "xi2_q", "dist_bs_clutter", "dist_ris_clutter"):
                data[key] = tuple(data[key])[:q]
        data.update(changes)
        return SceneConfig(**data)

    @classmethod
    def paper(cls, **changes) -> "SceneConfig":
        return cls(**changes)

    @classmethod
    def desk(cls, **changes) -> "SceneConfig":
        """Reduced dimensions (ML = 32) for fast oracles and acceptance runs."""
        base = dict(
            M=4,
            N=16,
            K=2,
            L=8,
            Q=2,
            theta_q=(math.radians(-60.0), math.radians(-20.0)),
            d_q=(0, 1),
            # link-level distances: RIS mounted close to the monitored area so
            # the reflected path is comparable to the direct one at N = 16
            dist_bs_ris=30.0,
            dist_ris_target=2.0,
            dist_bs_target=45.0,
            # -55 dBm user noise: at -80 dBm the CI threshold is a tiny
            # fraction of the received amplitude and Gamma_k stops binding
            sigma2_k=10 ** (-8.5),
        )
        base.update(changes)
        return cls(**base)


# ---------------------------------------------------------------------------
# config files

_POWER_KEYS = {"P", "sigma2_k", "xi2_z"}
_ANGLE_KEYS = {"theta_0", "theta_RIS", "theta_q", "theta_q_ris", "theta_bs_ris", "theta_ris_bs"}
_INT_KEYS = {"M", "N", "K", "L", "Q", "Omega", "seed"}
_PATHLOSS_KEYS = {"C0_dB", "d0"}


def _parse_power(token: str) -> float:
    m = re.fullmatch(r"\s*([-+0-9.eE]+)\s*(dBW|dBm|W)\s*", token)
    if not m:
        raise ValueError(f"power value {token!r} needs a unit suffix (dBW, dBm or W)")
    value, unit = float(m.group(1)), m.group(2)
    if unit == "W":
        return value
    if unit == "dBW":
        return 10.0 ** (value / 10.0)
    return 10.0 ** ((value - 30.0) / 10.0)


def _parse_angle(token: str) -> float:
    token = token.strip()
    if token.endswith("deg"):
        return math.radians(float(token[:-3]))
    if token.endswith("rad"):
        token = token[:-3]
    return float(token)


def _parse_snr(token: str) -> float:
    token = token.strip()
    if token.endswith("dB"):
        return 10.0 ** (float(token[:-2]) / 10.0)
    return float(token)


def _split(value: str) -> list[str]:
    return [v for v in (s.strip() for s in value.split(",")) if v]


def parse_config(text: str, base: SceneConfig | None = None) -> SceneConfig:
    """Parse a ``key = value`` config.

    Lists are comma separated. ``P``, ``sigma2_k`` and ``xi2_z`` require
    a ``dBW``/``dBm``/``W`` suffix; angles accept ``deg``/``rad``
    suffixes (bare numbers are radians); ``Gamma_k`` accepts ``dB``.
    Path-loss exponents are given as ``rho.<link> = value``. A
    ``preset = desk|paper`` line selects the starting point.
    """
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        items[key] = value

    preset = items.pop("preset", None)
    if base is None:
        base = SceneConfig.desk() if preset == "desk" else SceneConfig.paper()
    known = {f.name for f in dataclasses.fields(SceneConfig)}
    changes: dict = {}
    pathloss = dataclasses.replace(base.pathloss, rho=dict(base.pathloss.rho))
    for key, value in items.items():
        if key.startswith("rho."):
            link = key[4:]
            if link not in LINKS:
                raise ValueError(f"unknown path-loss link {link!r}")
            pathloss.rho[link] = float(value)
            continue
        if key in _PATHLOSS_KEYS:
            setattr(pathloss, key, float(value))
            continue
        if key not in known or key == "pathloss":
            raise ValueError(f"unknown config key {key!r}")
        parts = _split(value)
        if key in _POWER_KEYS:
            vals = [_parse_power(p) for p in parts]
        elif key in _ANGLE_KEYS:
            vals = [_parse_angle(p) for p in parts]
        elif key == "Gamma_k":
            vals = [_parse_snr(p) for p in parts]
        elif key in _INT_KEYS or key == "d_q":
            vals = [int(p) for p in parts]
        else:
            vals = [float(p) for p in parts]
        scalar_field = key in _INT_KEYS or key in {
            "P", "xi2_0", "xi2_z", "theta_0", "theta_RIS", "theta_bs_ris", "theta_ris_bs",
            "dist_bs_ris", "dist_ris_target", "dist_bs_target", "rician_dB",
        }
        changes[key] = vals[0] if scalar_field else tuple(vals)
    changes["pathloss"] = pathloss
    return base.replace(**changes)


def load_config(path: str | Path) -> SceneConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: SceneConfig) -> str:
    """Serialize to the ``key = value`` format read by :func:`parse_config`."""

    def fmt(values):
        return ", ".join(repr(float(v)) if not isinstance(v, int) else str(v) for v in values)

    lines = ["# scene configuration"]
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "pathloss":
            lines.append(f"C0_dB = {value.C0_dB!r}")
            lines.append(f"d0 = {value.d0!r}")
            lines.extend(f"rho.{link} = {rho!r}" for link, rho in value.rho.items())
        elif f.name in _POWER_KEYS:
            vals = value if isinstance(value, tuple) else (value,)
            lines.append(f"{f.name} = " + ", ".join(f"{v!r} W" for v in vals))
        elif f.name in _ANGLE_KEYS:
            vals = value if isinstance(value, tuple) else (value,)
            lines.append(f"{f.name} = " + ", ".join(f"{v!r} rad" for v in vals))
        elif isinstance(value, tuple):
            lines.append(f"{f.name} = {fmt(value)}" if value else f"{f.name} = ")
        else:
            lines.append(f"{f.name} = {value!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# channels


@dataclass
class ChannelSet:
    """All propagation channels of one scene (or a stacked batch).

    Shapes (unbatched): ``G (N, M)``, ``h_k (K, M)``, ``h_rk (K, N)``,
    ``h_bt (M,)``, ``h_rt (N,)``, ``h_bq (Q, M)``, ``h_rq (Q, N)``.
    """

    G: np.ndarray
    h_k: np.ndarray
    h_rk: np.ndarray
    h_bt: np.ndarray
    h_rt: np.ndarray
    h_bq: np.ndarray
    h_rq: np.ndarray
    seed: int | None = None

    FIELDS = ("G", "h_k", "h_rk", "h_bt", "h_rt", "h_bq", "h_rq")

    @property
    def batched(self) -> bool:
        return self.h_bt.ndim > 1

    @classmethod
    def stack(cls, sets: Sequence["ChannelSet"]) -> "ChannelSet":
        return cls(*(np.stack([getattr(s, name) for s in sets]) for name in cls.FIELDS))

    def unstack(self) -> list["ChannelSet"]:
        return [
            ChannelSet(*(getattr(self, name)[b] for name in self.FIELDS))
            for b in range(self.h_bt.shape[0])
        ]

    def map(self, fn) -> "ChannelSet":
        return ChannelSet(*(fn(getattr(self, name)) for name in self.FIELDS), seed=self.seed)

    def to_json(self, cfg: SceneConfig | None = None) -> dict:
        """Record with header and interleaved re/im payload per field."""
        M, N = self.G.shape[-1], self.G.shape[-2]
        header = {
            "M": M, "N": N, "K": self.h_k.shape[-2], "Q": self.h_bq.shape[-2],
            "L": cfg.L if cfg is not None else None, "seed": self.seed,
        }
        record = {"header": header}
        for name in self.FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.complex128)
            record[name] = {"shape": list(arr.shape), "data": arr.view(np.float64).ravel().tolist()}
        return record

    @classmethod
    def from_json(cls, record: dict) -> "ChannelSet":
        arrays = []
        for name in cls.FIELDS:
            item = record[name]
            flat = np.asarray(item["data"], dtype=np.float64)
            arrays.append(flat.view(np.complex128).reshape(item["shape"]))
        return cls(*arrays, seed=record["header"].get("seed"))


def _cn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def synth_channels(cfg: SceneConfig, rng: np.random.Generator | int | None = None) -> ChannelSet:
    """Draw one channel realization.

    Target/clutter links are path-loss-scaled steering vectors. ``G`` is
    Rician around the BS-RIS line-of-sight bearing; user links are
    Rayleigh.
    """
    seed = None
    if rng is None or isinstance(rng, (int, np.integer)):
        seed = cfg.seed if rng is None else int(rng)
        rng = np.random.default_rng(seed)
    pl = cfg.pathloss
    M, N, Q = cfg.M, cfg.N, cfg.Q

    kr = 10.0 ** (cfg.rician_dB / 10.0)
    los = np.outer(steering(cfg.theta_ris_bs, N), steering(cfg.theta_bs_ris, M).conj())
    nlos = _cn(rng, (N, M))
    G = pathloss_amplitude(cfg.dist_bs_ris, "bs_ris", pl) * (
        math.sqrt(kr / (kr + 1.0)) * los + math.sqrt(1.0 / (kr + 1.0)) * nlos
    )
    h_k = np.stack(
        [pathloss_amplitude(d, "bs_user", pl) * _cn(rng, M) for d in cfg.dist_bs_user]
    )
    h_rk = np.stack(
        [pathloss_amplitude(d, "ris_user", pl) * _cn(rng, N) for d in cfg.dist_ris_user]
    )
    h_bt = pathloss_amplitude(cfg.dist_bs_target, "bs_target", pl) * steering(cfg.theta_0, M)
    h_rt = pathloss_amplitude(cfg.dist_ris_target, "ris_target", pl) * steering(cfg.theta_RIS, N)
    h_bq = np.zeros((Q, M), complex)
    h_rq = np.zeros((Q, N), complex)
    for q in range(Q):
        h_bq[q] = pathloss_amplitude(cfg.dist_bs_clutter[q], "bs_target", pl) * steering(cfg.theta_q[q], M)
        h_rq[q] = pathloss_amplitude(cfg.dist_ris_clutter[q], "ris_target", pl) * steering(cfg.theta_q_ris[q], N)
    return ChannelSet(G, h_k, h_rk, h_bt, h_rt, h_bq, h_rq, seed=seed)


def synth_dataset(cfg: SceneConfig, B_sz: int, rng: np.random.Generator | int | None = None) -> list[ChannelSet]:
    """``B_sz`` independent channel sets drawn from one generator."""
    if B_sz < 1:
        raise ValueError("dataset size must be >= 1")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(cfg.seed if rng is None else int(rng))
    return [synth_channels(cfg, rng) for _ in range(B_sz)]


def save_dataset(path: str | Path, sets: Sequence[ChannelSet], cfg: SceneConfig | None = None):
    with open(path, "w") as fh:
        for s in sets:
            fh.write(json.dumps(s.to_json(cfg)) + "\n")


def load_dataset(path: str | Path) -> list[ChannelSet]:
    with open(path) as fh:
        return [ChannelSet.from_json(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# symbols


def psk_alphabet(Omega: int) -> np.ndarray:
    """Omega-PSK points ``exp(j(2i+1)pi/Omega)``; BPSK uses ``{+1, -1}``."""
    offset = 0.0 if Omega == 2 else math.pi / Omega
    return np.exp(1j * (offset + 2.0 * math.pi * np.arange(Omega) / Omega))


@dataclass
class SymbolFrame:
    """PSK symbols ``s[k, l]`` for K users over L slots."""

    s: np.ndarray

    @property
    def angles(self) -> np.ndarray:
        return np.angle(self.s)

    @classmethod
    def stack(cls, frames: Sequence["SymbolFrame"]) -> "SymbolFrame":
        return cls(np.stack([f.s for f in frames]))


def draw_symbols(cfg: SceneConfig, rng: np.random.Generator | int | None = None) -> SymbolFrame:
    """Uniform i.i.d. symbols from the Omega-PSK alphabet."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(cfg.seed if rng is None else int(rng))
    idx = rng.integers(0, cfg.Omega, size=(cfg.K, cfg.L))
    return SymbolFrame(psk_alphabet(cfg.Omega)[idx])
