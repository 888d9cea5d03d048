"""Run configuration: a flat ``key = value`` file with dotted namespaces.

Grammar: one ``key = value`` per line, ``#`` starts a comment, blank lines
are ignored.  Lists are comma separated.  Every key must appear in
:data:`SCHEMA`; later assignments (including ``--set`` overrides) win.
"""

import hashlib
import math
import os
from dataclasses import dataclass

from .errors import ConfigError


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s):
        s = s.strip()
        return tuple(conv(x.strip()) for x in s.split(",")) if s else ()
    return parse


def _gamma(s):
    """Wishart degrees of freedom: a positive integer, ``auto`` or ``inf``."""
    v = s.strip().lower()
    if v in ("inf", "off", "none"):
        return math.inf
    if v == "auto":
        return None
    g = int(v)
    if g < 1:
        raise ValueError("gamma must be >= 1")
    return g


def _gammas(s):
    return _list(_gamma)(s)


def _pairs(s):
    out = []
    for item in _list(str)(s):
        a, b = item.split(":")
        out.append((int(a), int(b)))
    return tuple(out)


def _choice(*options):
    def parse(s):
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v
    return parse


# key -> (parser, default text)
SCHEMA = {
    "seed": (int, "0"),
    "precision": (_choice("single", "double"), "double"),
    "data.kind": (_choice("toy", "raw_u8"), "toy"),
    "data.path": (str, ""),
    "data.eval_path": (str, ""),
    "data.n": (int, "512"),
    "data.eval_n": (int, "256"),
    "data.noise": (float, "0.1"),
    "data.seed": (int, "0"),
    "model.layers": (_list(str), "fc"),
    "model.inducing": (_list(int), "100"),
    "model.kernel": (_choice("sq_exp", "arccos1", "normalised_gaussian"), "sq_exp"),
    "model.lengthscale": (float, "1.0"),
    "model.final_kernel": (_choice("", "sq_exp", "arccos1", "normalised_gaussian"), ""),
    "model.kernel_jitter": (float, "0.01"),
    "model.batch_norm": (_bool, "true"),
    "model.skips": (_pairs, ""),
    "model.mixup_fc": (_bool, "false"),
    "skr.enabled": (_bool, "true"),
    "skr.gamma": (_gamma, "auto"),
    "skr.gamma_ratio": (float, "0.25"),
    "skr.jitter": (float, "0.1"),
    "objective.nu": (_list(float), "0.001"),
    "objective.kl_mode": (_choice("exact", "taylor"), "taylor"),
    "objective.mc_samples_train": (int, "8"),
    "train.lr": (float, "0.01"),
    "train.decay_epochs": (_list(int), ""),
    "train.decay_factor": (float, "0.1"),
    "train.beta1": (float, "0.8"),
    "train.beta2": (float, "0.9"),
    "train.eps": (float, "1e-8"),
    "train.epochs": (int, "100"),
    "train.batch_size": (int, "256"),
    "train.mc_samples_eval": (int, "32"),
    "train.eval_every": (int, "1"),
    "train.checkpoint_every": (int, "0"),
    "cond.gammas": (_gammas, "inf,400,100,25"),
    "cond.nus": (_list(float), "0,0.001"),
    "cond.kl_modes": (_list(_choice("exact", "taylor")), "taylor"),
    "cond.workers": (int, "1"),
    "gradcheck.threshold": (float, "1e-4"),
    "gradcheck.step": (float, "1e-5"),
    "gradcheck.n": (int, "8"),
    "gen.kind": (_choice("toy", "shapes"), "toy"),
    "gen.n": (int, "512"),
    "gen.eval_n": (int, "256"),
    "gen.size": (int, "8"),
    "gen.channels": (int, "1"),
    "gen.noise": (float, "0.05"),
}

PATH_KEYS = ("data.path", "data.eval_path")


def parse_text(text, source="<config>"):
    """Raw ``key -> value string`` assignments from config text."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (p.strip() for p in body.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = val
    return out


def parse_override(item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, val = item.split("=", 1)
    return key.strip(), val.strip()


@dataclass(frozen=True)
class RunConfig:
    raw: dict      # key -> value text, every schema key present
    values: dict   # key -> parsed value

    def __getitem__(self, key):
        return self.values[key]

    def render(self):
        """Canonical text form; loading it back gives the same config."""
        return "".join(f"{k} = {self.raw[k]}\n" for k in SCHEMA)

    def digest(self):
        return hashlib.sha256(self.render().encode("utf-8")).digest()

    def with_overrides(self, overrides, check_paths=True):
        raw = dict(self.raw)
        raw.update(overrides)
        return build(raw, check_paths=check_paths)


def build(assignments, check_paths=True):
    unknown = sorted(set(assignments) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    raw = {k: default for k, (_, default) in SCHEMA.items()}
    raw.update(assignments)
    values = {}
    for key, (parser, _) in SCHEMA.items():
        try:
            values[key] = parser(raw[key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from None
    if check_paths:
        for key in PATH_KEYS:
            if values[key] and not os.path.exists(values[key]):
                raise ConfigError(f"{key} does not exist: {values[key]}")
    return RunConfig(raw, values)


def load_config(path=None, overrides=(), check_paths=True):
    """Read ``path`` (optional), apply ``key=value`` overrides, validate."""
    assignments = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        assignments.update(parse_text(text, str(path)))
        base = os.path.dirname(os.path.abspath(path))
        for key in PATH_KEYS:
            v = assignments.get(key, "")
            if v and not os.path.isabs(v):
                assignments[key] = os.path.join(base, v)
    for item in overrides:
        key, val = parse_override(item) if isinstance(item, str) else item
        assignments[key] = val
    return build(assignments, check_paths)
