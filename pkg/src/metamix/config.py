"""Run configuration.

Grammar: an INI file read with :mod:`configparser`.  Sections and keys::

    [model]   name (mobilenet | resnet | plain), width, depth, num_classes,
              candidates (comma list; "a/w" items switch on pair mode),
              weight_bits, bn_momentum
    [data]    kind (synthetic_cifar | cifar10 | mnist | blobs), path,
              n_train, n_test, seed
    [search]  t_bops (number or "ratio:<r>" of the all-max-bits cost),
              lambda_r, unit (blank = t_bops)
    [plan]    any PhasePlan field
    [analyze] bn_iterations, bn_every, bn_epoch_len, bn_layer, hist_layer,
              hessian_probes, hessian_samples, qgauss_n
    [run]     seed, out

Precedence, lowest first: built-in defaults, the config file, ``--set
section.key=value`` overrides, then the dedicated ``--seed`` / ``--out``
flags.  Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .trainer import PhasePlan
from .zoo import DEFAULT_CANDIDATES_BY_MODEL, ModelSpec, build_plain_net, build_toy_mobilenet, build_toy_resnet


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "model": {"name": "mobilenet", "width": "8", "depth": "8", "num_classes": "10",
              "candidates": "", "weight_bits": "4", "bn_momentum": "0.1"},
    "data": {"kind": "synthetic_cifar", "path": "", "n_train": "2000", "n_test": "1000",
             "seed": "0"},
    "search": {"t_bops": "ratio:0.6", "lambda_r": "", "unit": ""},
    "plan": {f.name: "" for f in fields(PhasePlan)},
    "analyze": {"bn_iterations": "150", "bn_every": "1", "bn_epoch_len": "25",
                "bn_layer": "b2.dw", "hist_layer": "b2.dw", "hessian_probes": "10",
                "hessian_samples": "128", "qgauss_n": "1000000"},
    "run": {"seed": "0", "out": "runs/default"},
}

# default lambda_r per model family
DEFAULT_LAMBDA = {"mobilenet": 1.0, "resnet": 0.4, "plain": 1.0}


def _parse_candidates(text: str):
    out = []
    for tok in text.replace(" ", "").split(","):
        if not tok:
            continue
        if "/" in tok:
            a, w = tok.split("/")
            out.append((int(a), int(w)))
        else:
            out.append(int(tok))
    return tuple(out)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: dict(kv) for s, kv in DEFAULTS.items()})

    # -- construction ---------------------------------------------------------------

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None, seed: int | None = None,
             out: str | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            for section in parser.sections():
                for key, value in parser.items(section):
                    cfg.set(section, key, value)
        for item in overrides or []:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            lhs, value = item.split("=", 1)
            section, key = lhs.split(".", 1)
            cfg.set(section.strip(), key.strip(), value.strip())
        if seed is not None:
            cfg.set("run", "seed", str(seed))
        if out is not None:
            cfg.set("run", "out", out)
        cfg.validate()
        return cfg

    def set(self, section: str, key: str, value: str) -> None:
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]; known: {sorted(self.values[section])}")
        self.values[section][key] = value

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def to_text(self) -> str:
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in kv.items()]
            lines.append("")
        return "\n".join(lines)

    # -- typed views ----------------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.get("run", "seed"))

    @property
    def out(self) -> Path:
        return Path(self.get("run", "out"))

    @property
    def model_name(self) -> str:
        return self.get("model", "name")

    def candidates(self):
        text = self.get("model", "candidates")
        return _parse_candidates(text) if text else DEFAULT_CANDIDATES_BY_MODEL[self.model_name]

    def model_spec(self) -> ModelSpec:
        m = self.values["model"]
        name = m["name"]
        cands = self.candidates()
        if name == "mobilenet":
            return build_toy_mobilenet(width=int(m["width"]), num_classes=int(m["num_classes"]),
                                       candidates=cands)
        if name == "resnet":
            return build_toy_resnet(depth=int(m["depth"]), num_classes=int(m["num_classes"]),
                                    width=int(m["width"]), candidates=cands)
        if name == "plain":
            return build_plain_net(num_classes=int(m["num_classes"]), candidates=cands)
        raise ConfigError(f"unknown model name {name!r}")

    def plan(self) -> PhasePlan:
        kw = {}
        for f in fields(PhasePlan):
            raw = self.get("plan", f.name)
            if raw == "":
                continue
            default = getattr(PhasePlan(), f.name)
            if isinstance(default, bool):
                kw[f.name] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            elif isinstance(default, float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = raw
        plan = PhasePlan(**kw)
        plan.validate()
        return plan

    def lambda_r(self) -> float:
        raw = self.get("search", "lambda_r")
        return float(raw) if raw else DEFAULT_LAMBDA[self.model_name]

    def data_kwargs(self) -> dict:
        d = self.values["data"]
        return {"n_train": int(d["n_train"]), "n_test": int(d["n_test"]), "seed": int(d["seed"])}

    def data_path(self) -> Path:
        p = self.get("data", "path")
        return Path(p) if p else self.out / "data"

    def analyze_int(self, key: str) -> int:
        return int(self.get("analyze", key))

    def validate(self) -> None:
        try:
            self.seed
            if self.model_name not in DEFAULT_LAMBDA:
                raise ConfigError(f"unknown model name {self.model_name!r}")
            self.candidates()
            self.plan()
            self.lambda_r()
            self.data_kwargs()
            t = self.get("search", "t_bops")
            if not t.startswith("ratio:"):
                float(t)
            elif not float(t.split(":", 1)[1]) > 0:
                raise ConfigError("t_bops ratio must be positive")
            if self.get("search", "unit"):
                float(self.get("search", "unit"))
            for key in DEFAULTS["analyze"]:
                if key not in ("bn_layer", "hist_layer"):
                    self.analyze_int(key)
            for key in ("width", "depth", "num_classes", "weight_bits"):
                int(self.get("model", key))
            float(self.get("model", "bn_momentum"))
        except ConfigError:
            raise
        except (ValueError, KeyError) as e:
            raise ConfigError(f"invalid configuration: {e}") from e
