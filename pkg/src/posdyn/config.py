"""JSON experiment configs: parsing, defaults and validation.

A config names one subcommand and carries a parameter block under the same
key::

    {"subcommand": "urn", "seed": 7, "out_dir": "out/urn",
     "urn": {"coins": [1, 99], "horizon": 50000, "runs": 10000}}

:func:`validate` reports every violation at once.  Each message names the
field and the invariant it breaks, e.g. ``"trading.delta: delta ∈ (0,1]"``.
Missing optional fields are filled from :data:`DEFAULTS`; the filled config
is what gets echoed into ``manifest.json``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass

from .errors import ConfigError, PosDynError

SUBCOMMANDS = ("urn", "limits", "sweep", "trading", "hjb", "mfg")
SEED_MAX = 2**64 - 1
REQUIRED = object()

CONSTANT_R1 = {"kind": "constant", "R": 1.0}

DEFAULTS: dict[str, dict] = {
    "urn": {
        "coins": REQUIRED,
        "schedule": CONSTANT_R1,
        "horizon": REQUIRED,
        "runs": REQUIRED,
        "probe": 0,
        "bins": 50,
        "range": [0.0, 5.0],
        "trajectories": 0,
        "thresholds": [0.5, 2.0],
        "share_thresholds": [0.99],
    },
    "limits": {
        "law": "dirichlet",
        "coins": REQUIRED,
        "R": 1.0,
        "count": REQUIRED,
        "probe": 0,
        "bins": 50,
        "range": None,
    },
    "sweep": {
        "schedule": CONSTANT_R1,
        "N": REQUIRED,
        "n0": None,
        "n0_fraction": None,
        "epsilon": 0.5,
        "horizon": 10_000,
        "runs": 1000,
    },
    "trading": {
        "delta": REQUIRED,
        "r_free": 0.0,
        "r_cryp": REQUIRED,
        "P0": REQUIRED,
        "T": REQUIRED,
        "s": 0.0,
        "coins": [1.0, 9.0],
        "schedule": CONSTANT_R1,
        "miner": 0,
        "paths": 10_000,
        "n_random": 50,
    },
    "hjb": {
        "alpha": REQUIRED,
        "N0": REQUIRED,
        "T": REQUIRED,
        "beta": REQUIRED,
        "ell": REQUIRED,
        "h": REQUIRED,
        "nubar": REQUIRED,
        "x0": REQUIRED,
        "price": REQUIRED,
        "r": 0.0,
        "M": 400,
        "J": 400,
        "stride": 1,
    },
    "mfg": {
        "K": REQUIRED,
        "alpha": REQUIRED,
        "N0": REQUIRED,
        "T": REQUIRED,
        "Z0": REQUIRED,
        "eta": REQUIRED,
        "rho": REQUIRED,
        "P0": REQUIRED,
        "beta": REQUIRED,
        "ell": REQUIRED,
        "h": REQUIRED,
        "m0": [[20.0, 30.0, 1.0]],
        "sigma": 0.0,
        "damping": 0.5,
        "tol": 1e-6,
        "max_iter": 200,
        "M": 200,
        "J": 200,
        "stride": 1,
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    subcommand: str
    seed: int
    out_dir: str
    params: dict

    def to_dict(self) -> dict:
        return {"subcommand": self.subcommand, "seed": self.seed, "out_dir": self.out_dir,
                self.subcommand: copy.deepcopy(self.params)}


# -- field checks ---------------------------------------------------------------
# Each check returns None when fine, else the invariant text.


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def num(lo=None, hi=None, lo_open=False, hi_open=False, integer=False, text=None):
    def check(v):
        ok = (_is_int(v) if integer else _is_num(v))
        if ok and lo is not None:
            ok = v > lo if lo_open else v >= lo
        if ok and hi is not None:
            ok = v < hi if hi_open else v <= hi
        return None if ok else text
    return check


def positive(name):
    return num(0, lo_open=True, text=f"{name} > 0")


def nonneg(name):
    return num(0, text=f"{name} ≥ 0")


def count(name, least=1):
    return num(least, integer=True, text=f"{name} integer ≥ {least}")


def vector(name, least=1, elem_ok=lambda x: _is_num(x) and x > 0, what="positive numbers"):
    def check(v):
        if isinstance(v, list) and len(v) >= least and all(elem_ok(x) for x in v):
            return None
        return f"{name} list of ≥ {least} {what}"
    return check


def pair_range(name):
    def check(v):
        if isinstance(v, list) and len(v) == 2 and all(_is_num(x) for x in v) and v[0] < v[1]:
            return None
        return f"{name} = [lo, hi] with lo < hi"
    return check


def one_of(name, options):
    def check(v):
        return None if v in options else f"{name} ∈ {{{', '.join(options)}}}"
    return check


def schedule_check(v):
    from .urn import SCHEDULE_KINDS

    if not isinstance(v, dict) or v.get("kind") not in SCHEDULE_KINDS:
        return f"schedule.kind ∈ {{{', '.join(SCHEDULE_KINDS)}}}"
    try:
        make_schedule(v)
    except (PosDynError, TypeError) as e:
        return f"schedule: {e}"
    return None


def price_check(v):
    if not isinstance(v, dict) or v.get("model") not in ("constant", "gbm"):
        return "price.model ∈ {constant, gbm}"
    if not (_is_num(v.get("P0")) and v["P0"] > 0):
        return "price.P0 > 0"
    if v["model"] == "gbm" and not _is_num(v.get("mu")):
        return "price.mu required for gbm"
    if v["model"] == "gbm" and not (_is_num(v.get("sigma", 0.0)) and v.get("sigma", 0.0) >= 0):
        return "price.sigma ≥ 0"
    return None


def boxes_check(v):
    ok = isinstance(v, list) and len(v) >= 1 and all(
        isinstance(b, list) and len(b) == 3 and all(_is_num(x) for x in b) for b in v)
    return None if ok else "m0 list of [lo, hi, weight] boxes"


RULES: dict[str, dict] = {
    "urn": {
        "coins": vector("coins", 1, lambda x: _is_num(x) and x >= 0, "nonnegative numbers"),
        "schedule": schedule_check,
        "horizon": count("horizon", 0),
        "runs": count("runs"),
        "probe": count("probe", 0),
        "bins": count("bins"),
        "range": pair_range("range"),
        "trajectories": count("trajectories", 0),
        "thresholds": vector("thresholds", 0, _is_num, "numbers"),
        "share_thresholds": vector("share_thresholds", 0, _is_num, "numbers"),
    },
    "limits": {
        "law": one_of("law", ("dirichlet", "gamma")),
        "coins": vector("coins"),
        "R": positive("R"),
        "count": count("count"),
        "probe": count("probe", 0),
        "bins": count("bins"),
        "range": lambda v: None if v is None else pair_range("range")(v),
    },
    "sweep": {
        "schedule": schedule_check,
        "N": vector("N"),
        "n0": lambda v: None if v is None else vector("n0")(v),
        "n0_fraction": lambda v: None if v is None else vector(
            "n0_fraction", 1, lambda x: _is_num(x) and 0 < x < 1, "numbers in (0,1)")(v),
        "epsilon": positive("epsilon"),
        "horizon": count("horizon"),
        "runs": count("runs", 100),
    },
    "trading": {
        "delta": num(0, 1, lo_open=True, text="delta ∈ (0,1]"),
        "r_free": nonneg("r_free"),
        "r_cryp": num(-1, lo_open=True, text="r_cryp > -1"),
        "P0": positive("P0"),
        "T": count("T"),
        "s": nonneg("s"),
        "coins": vector("coins", 1, lambda x: _is_num(x) and x >= 0, "nonnegative numbers"),
        "schedule": schedule_check,
        "miner": count("miner", 0),
        "paths": count("paths", 2),
        "n_random": count("n_random", 0),
    },
    "hjb": {
        "alpha": positive("alpha"),
        "N0": positive("N0"),
        "T": positive("T"),
        "beta": nonneg("beta"),
        "ell": num(text="ell finite"),
        "h": num(text="h finite"),
        "nubar": nonneg("nubar"),
        "x0": positive("x0"),
        "price": price_check,
        "r": nonneg("r"),
        "M": count("M"),
        "J": count("J", 2),
        "stride": count("stride"),
    },
    "mfg": {
        "K": count("K", 2),
        "alpha": positive("alpha"),
        "N0": positive("N0"),
        "T": positive("T"),
        "Z0": nonneg("Z0"),
        "eta": positive("eta"),
        "rho": positive("rho"),
        "P0": num(text="P0 finite"),
        "beta": nonneg("beta"),
        "ell": num(text="ell finite"),
        "h": num(text="h finite"),
        "m0": boxes_check,
        "sigma": nonneg("sigma"),
        "damping": num(0, 1, lo_open=True, text="damping ∈ (0,1]"),
        "tol": positive("tol"),
        "max_iter": count("max_iter"),
        "M": count("M"),
        "J": count("J", 2),
        "stride": count("stride"),
    },
}


# -- builders (also used to surface cross-field invariants) --------------------------


def make_schedule(spec: dict):
    from .urn import SCHEDULE_KINDS

    cls = SCHEDULE_KINDS[spec["kind"]]
    args = {k: v for k, v in spec.items() if k != "kind"}
    return cls(**args)


def trading_env(p: dict):
    from .trading import TradingEnv

    return TradingEnv(delta=p["delta"], r_free=p["r_free"], r_cryp=p["r_cryp"], P0=p["P0"],
                      T=p["T"], s=p["s"], coins=tuple(p["coins"]),
                      schedule=make_schedule(p["schedule"]), miner=p["miner"])


def control_params(p: dict):
    from .hjb import GBM, ConstantPtilde, ControlParams

    pr = p["price"]
    price = (ConstantPtilde(pr["P0"]) if pr["model"] == "constant"
             else GBM(pr["P0"], pr["mu"], pr.get("sigma", 0.0)))
    return ControlParams(alpha=p["alpha"], N0=p["N0"], T=p["T"], beta=p["beta"], ell=p["ell"],
                         h=p["h"], nubar=p["nubar"], x0=p["x0"], price=price, r=p["r"])


def mfg_params(p: dict):
    from .mfg import MfgParams

    return MfgParams(K=p["K"], alpha=p["alpha"], N0=p["N0"], T=p["T"], Z0=p["Z0"],
                     eta=p["eta"], rho=p["rho"], P0=p["P0"], beta=p["beta"], ell=p["ell"],
                     h=p["h"], m0=tuple(tuple(b) for b in p["m0"]), sigma=p["sigma"])


def _cross_checks(sub: str, p: dict) -> list[str]:
    """Invariants spanning several fields, checked by building the domain objects."""
    out = []
    try:
        if sub == "urn":
            from .urn import ChainState

            ChainState.initial(p["coins"])
            if p["probe"] >= len(p["coins"]):
                out.append("urn.probe: probe < number of miners")
        elif sub == "limits":
            if p["law"] == "gamma" and len(p["coins"]) != 1:
                out.append("limits.coins: gamma law takes a single coin count [n0]")
            if p["law"] == "dirichlet" and p["probe"] >= len(p["coins"]):
                out.append("limits.probe: probe < number of miners")
        elif sub == "sweep":
            if (p["n0"] is None) == (p["n0_fraction"] is None):
                out.append("sweep: exactly one of n0, n0_fraction")
            elif p["n0"] is not None and any(n0 >= N for n0 in p["n0"] for N in p["N"]):
                out.append("sweep.n0: every n0 < every N")
        elif sub == "trading":
            trading_env(p)
        elif sub == "hjb":
            control_params(p)
        elif sub == "mfg":
            mfg_params(p)
    except (PosDynError, TypeError) as e:
        out.append(f"{sub}: {e}")
    return out


# -- entry point ------------------------------------------------------------------


def parse(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"parse error at line {e.lineno}, column {e.colno}: {e.msg}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    return doc


def validate(text_or_doc, overrides: dict | None = None) -> ExperimentConfig:
    """Parse, apply ``overrides`` (CLI flags win over file values), fill defaults, check."""
    doc = parse(text_or_doc) if isinstance(text_or_doc, str) else copy.deepcopy(text_or_doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    errors: list[str] = []

    sub = doc.get("subcommand")
    if sub not in SUBCOMMANDS:
        errors.append(f"subcommand: subcommand ∈ {{{', '.join(SUBCOMMANDS)}}}")
    seed = doc.get("seed")
    if seed is None:
        errors.append("seed required")
    elif not (_is_int(seed) and 0 <= seed <= SEED_MAX):
        errors.append("seed: seed integer in [0, 2^64)")
    out_dir = doc.get("out_dir")
    if out_dir is None:
        errors.append("out_dir required")
    elif not (isinstance(out_dir, str) and out_dir):
        errors.append("out_dir: out_dir nonempty path")
    extra_blocks = [k for k in SUBCOMMANDS if k in doc and k != sub]
    for k in extra_blocks:
        errors.append(f"{k}: exactly one subcommand block (found a block for {k})")
    unknown_top = set(doc) - {"subcommand", "seed", "out_dir", *SUBCOMMANDS}
    for k in sorted(unknown_top):
        errors.append(f"{k}: unknown top-level field")

    params: dict = {}
    if sub in SUBCOMMANDS:
        block = doc.get(sub, {})
        if not isinstance(block, dict):
            errors.append(f"{sub}: parameter block must be an object")
            block = {}
        for k in sorted(set(block) - set(DEFAULTS[sub])):
            errors.append(f"{sub}.{k}: unknown field")
        block_errors = []
        for k, default in DEFAULTS[sub].items():
            if k in block:
                params[k] = block[k]
            elif default is REQUIRED:
                block_errors.append(f"{sub}.{k}: {k} required")
                continue
            else:
                params[k] = copy.deepcopy(default)
            msg = RULES[sub][k](params[k])
            if msg:
                block_errors.append(f"{sub}.{k}: {msg}")
        errors.extend(block_errors)
        if not block_errors:
            errors.extend(_cross_checks(sub, params))

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(sub, int(seed), out_dir, params)
