"""Command-line front end: ``cebm train | sample | eval``.

Run configs are INI files (sections model, train, sgld, data, eval, paths,
run).  Every key has an explicit default and unknown keys are rejected.
Relative output directories resolve under ``$CEBM_OUTPUT_ROOT`` when set.

Exit codes: 0 success, 2 config error, 3 data/checkpoint error,
4 divergence, 5 metric failure.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .data_io import (
    Checkpoint,
    DataError,
    Dataset,
    export_samples,
    gen_synthetic,
    load_checkpoint,
    load_idx,
    save_checkpoint,
    write_csv,
    write_json,
)
from .model import BaselineEbm, CebmModel, GmmCebmModel, build_model, encoder_template
from .rng import spawn
from .sampler import SgldConfig, SgldDivergence, sgld_run
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger("cebm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_METRIC = 0, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "CEBM_OUTPUT_ROOT"
METRICS = ("knn", "ood", "fewlabel", "collapse")


class ConfigError(ValueError):
    pass


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none", "alpha") else float(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _words(s: str) -> list:
    return [w.strip() for w in s.replace(";", ",").split(",") if w.strip()]


# section -> key -> (parser, default text)
SCHEMA = {
    "model": {
        "kind": (str, "cebm"),
        "latent_dim": (int, "16"),
        "components": (int, "10"),
        "encoder": (str, "mlp"),
        "stat_head_scale": (float, "1.0"),
    },
    "train": {
        "learning_rate": (float, "0.0001"),
        "batch_size": (int, "64"),
        "total_steps": (int, "2000"),
        "l2_energy_coef": (float, "0.1"),
        "data_noise_variance": (float, "0.03"),
        "reinit_prob": (float, "0.05"),
        "buffer_capacity": (int, "5000"),
        "beta1": (float, "0.9"),
        "beta2": (float, "0.999"),
        "adam_eps": (float, "1e-08"),
    },
    "sgld": {
        "step_size": (float, "0.075"),
        "steps": (int, "60"),
        "noise_variance": (_opt_float, "alpha"),
        "clamp": (_bool, "true"),
    },
    "data": {
        "source": (str, "synthetic"),
        "kind": (str, "bar_patterns"),
        "image_size": (int, "28"),
        "num_classes": (int, "4"),
        "train_per_class": (int, "200"),
        "test_per_class": (int, "100"),
        "noise": (float, "0.0"),
        "jitter": (float, "0.0"),
        "bar_width": (_opt_float, "none"),
        "train_images": (str, ""),
        "train_labels": (str, ""),
        "test_images": (str, ""),
        "test_labels": (str, ""),
        "ood": (_words, "none"),
        "ood_count": (int, "100"),
    },
    "eval": {
        "metrics": (_words, "knn"),
        "k": (int, "1"),
        "per_class": (_words, "1, 10, full"),
        "repeats": (int, "10"),
        "ood_kinds": (_words, "log_density, grad_norm"),
        "mc_batch": (int, "1000"),
        "resamples": (int, "5"),
    },
    "paths": {
        "output_dir": (str, "runs/default"),
    },
    "run": {
        "seed": (int, "0"),
    },
}


@dataclass
class RunConfig:
    values: dict  # section -> key -> parsed value
    text: dict    # section -> key -> normalized text (for the echo)

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section in SCHEMA:
            cp[section] = self.text[section]
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def train_config(self) -> TrainConfig:
        t, s = self.values["train"], self.values["sgld"]
        sgld = SgldConfig(step_size=s["step_size"], steps=s["steps"],
                          noise_variance=s["noise_variance"], clamp=s["clamp"])
        return TrainConfig(sgld=sgld, seed=self.seed, **t)

    def output_dir(self) -> Path:
        out = Path(self.values["paths"]["output_dir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
    values, echo = {}, {}
    for section, keys in SCHEMA.items():
        values[section], echo[section] = {}, {}
        for key, (conv, default) in keys.items():
            raw = cp.get(section, key, fallback=default) if cp.has_section(section) else default
            try:
                values[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for '{key}' in [{section}]: {exc}") from None
            echo[section][key] = raw.strip()
    _validate(values)
    return RunConfig(values, echo)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def _validate(v: dict) -> None:
    def fail(section, key, why):
        raise ConfigError(f"bad value for '{key}' in [{section}]: {why}")

    if v["model"]["kind"] not in ("cebm", "gmm-cebm", "baseline-ebm"):
        fail("model", "kind", "expected cebm, gmm-cebm or baseline-ebm")
    if not 1 <= v["model"]["latent_dim"] <= 128:
        fail("model", "latent_dim", "must lie in [1, 128]")
    if v["model"]["components"] < 1:
        fail("model", "components", "must be positive")
    if v["data"]["source"] not in ("synthetic", "idx"):
        fail("data", "source", "expected synthetic or idx")
    for m in v["eval"]["metrics"]:
        if m not in METRICS:
            fail("eval", "metrics", f"unknown metric {m!r}")
    for pc in v["eval"]["per_class"]:
        if pc != "full" and not pc.isdigit():
            fail("eval", "per_class", f"expected integers or 'full', got {pc!r}")
    for kind in v["eval"]["ood_kinds"]:
        if kind not in ("log_density", "grad_norm"):
            fail("eval", "ood_kinds", f"unknown score {kind!r}")
    for src in v["data"]["ood"]:
        if src not in ("none", "constant", "unseen"):
            fail("data", "ood", f"unknown OOD source {src!r}")
    try:
        TrainConfig(**v["train"])
        SgldConfig(v["sgld"]["step_size"], v["sgld"]["steps"], v["sgld"]["noise_variance"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# data and models from a config


def load_datasets(cfg: RunConfig) -> tuple:
    """(train, test) datasets described by the [data] section."""
    d = cfg["data"]
    if d["source"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not d[key]:
                raise DataError(f"[data] {key} is required for source = idx")
        size = d["image_size"] or None
        return (load_idx(d["train_images"], d["train_labels"], size, name="idx", split="train"),
                load_idx(d["test_images"], d["test_labels"], size, name="idx", split="test"))
    tr_rng, te_rng = spawn(cfg.seed, "train-data", "test-data")
    common = dict(num_classes=d["num_classes"], noise=d["noise"], jitter=d["jitter"],
                  bar_width=d["bar_width"])
    return (gen_synthetic(d["kind"], d["train_per_class"], d["image_size"], tr_rng, split="train", **common),
            gen_synthetic(d["kind"], d["test_per_class"], d["image_size"], te_rng, split="test", **common))


def constant_images(count: int, shape) -> np.ndarray:
    """Images whose pixels all share one level, levels evenly spaced in [0, 1]."""
    levels = np.linspace(0.0, 1.0, count)
    return levels.reshape((count,) + (1,) * len(shape)) * np.ones((count,) + tuple(shape))


def unseen_bars(cfg: RunConfig, count: int) -> np.ndarray:
    """Bars at the angles halfway between the training orientations."""
    d = cfg["data"]
    (rng,) = spawn(cfg.seed, "unseen-data")
    per = max(1, -(-count // d["num_classes"]))
    ds = gen_synthetic("bar_patterns", per, d["image_size"], rng, num_classes=2 * d["num_classes"],
                       noise=d["noise"], jitter=d["jitter"], bar_width=d["bar_width"])
    return ds.images[ds.labels % 2 == 1][:count]


def ood_sets(cfg: RunConfig, shape) -> dict:
    d = cfg["data"]
    out = {}
    for src in d["ood"]:
        if src == "constant":
            out["constant"] = constant_images(d["ood_count"], shape)
        elif src == "unseen":
            if d["source"] != "synthetic" or d["kind"] != "bar_patterns":
                raise ev.MetricError("unseen OOD class needs the bar_patterns synthetic source")
            out["unseen"] = unseen_bars(cfg, d["ood_count"])
    return out


def init_model(cfg: RunConfig, input_shape):
    m = cfg["model"]
    enc = encoder_template(m["encoder"], tuple(input_shape), m["latent_dim"])
    (rng,) = spawn(cfg.seed, "init")
    if m["kind"] == "cebm":
        return CebmModel.init(enc, rng, stat_head_scale=m["stat_head_scale"])
    if m["kind"] == "gmm-cebm":
        return GmmCebmModel.init(enc, rng, components=m["components"],
                                 stat_head_scale=m["stat_head_scale"])
    return BaselineEbm.init(enc, rng)


def model_to_checkpoint(model, step: int, cfg: RunConfig | None = None,
                        rng_states: dict | None = None) -> Checkpoint:
    meta = {"model": model.meta()}
    if cfg is not None:
        meta["config"] = cfg.text
        meta["rng"] = {"algorithm": "philox4x64", "seed": cfg.seed, "streams": rng_states or {}}
    return Checkpoint(model.kind, dict(model.params), step, meta)


def checkpoint_to_model(ckpt: Checkpoint):
    try:
        return build_model(ckpt.meta["model"], ckpt.params)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"checkpoint metadata does not describe a model: {exc}") from None


# --------------------------------------------------------------------------
# commands


def cmd_train(config_path) -> int:
    cfg = load_config(config_path)
    tc = cfg.train_config()
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    train_set, _ = load_datasets(cfg)
    model = init_model(cfg, train_set.sample_shape)

    last_states = {}

    def save(step, m, rng_states=None):
        last_states.clear()
        last_states.update(rng_states or {})
        save_checkpoint(out / f"ckpt_{step:06d}.cebm", model_to_checkpoint(m, step, cfg, rng_states))

    save(0, model)
    try:
        trained, diag, _ = train(model, train_set, tc, checkpoint_fn=save)
    except TrainingDiverged as exc:
        exc.diagnostics.write_csv(out / "diagnostics.csv")
        save_checkpoint(out / "last_good.cebm", model_to_checkpoint(exc.last_good, exc.step, cfg))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    diag.write_csv(out / "diagnostics.csv")
    save_checkpoint(out / "final.cebm", model_to_checkpoint(trained, tc.total_steps, cfg, last_states))
    gap = f"; final energy gap {diag.rows[-1].gap:.6g}" if diag.rows else ""
    print(f"trained {tc.total_steps} steps{gap}; outputs in {out}")
    return EXIT_OK


def cmd_sample(ckpt_path, steps: int = 500, count: int = 16, out_path="samples.pgm", seed: int = 0) -> int:
    if count < 1 or steps < 1:
        raise ConfigError("count and steps must be positive")
    ckpt = load_checkpoint(ckpt_path)
    model = checkpoint_to_model(ckpt)
    sgld = SgldConfig(steps=steps)
    text = ckpt.meta.get("config", {}).get("sgld")
    if text:
        sg = parse_config(_ini({"sgld": text}))["sgld"]
        sgld = SgldConfig(sg["step_size"], steps, sg["noise_variance"], sg["clamp"])
    (rng,) = spawn(seed, "sample")
    x0 = rng.random((count,) + tuple(model.config.input_shape))
    try:
        x = sgld_run(model.energy_and_input_grad, x0, sgld, rng)
    except SgldDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if x.ndim != 4:
        x = x.reshape(count, 1, 1, -1)
    w, h = export_samples(out_path, x, math.ceil(math.sqrt(count)), step=ckpt.step, seed=seed)
    print(f"wrote {count} samples ({w}x{h}) to {out_path}")
    return EXIT_OK


def _ini(sections: dict) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for k, v in sections.items():
        cp[k] = v
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def cmd_eval(ckpt_path, config_path, metrics=None) -> int:
    cfg = load_config(config_path)
    metrics = list(metrics) if metrics else list(cfg["eval"]["metrics"])
    for m in metrics:
        if m not in METRICS:
            raise ConfigError(f"unknown metric {m!r}; choose from {', '.join(METRICS)}")
    ckpt = load_checkpoint(ckpt_path)
    model = checkpoint_to_model(ckpt)
    train_set, test_set = load_datasets(cfg)
    if train_set.sample_shape != tuple(model.config.input_shape):
        raise DataError(f"data shape {train_set.sample_shape} does not match model input "
                        f"{tuple(model.config.input_shape)}")
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    header = {"seed": cfg.seed, "config": {"data": cfg.text["data"], "eval": cfg.text["eval"]},
              "checkpoint_step": ckpt.step}
    failures = []
    for name in metrics:
        try:
            doc = _run_metric(name, model, cfg, train_set, test_set, out)
        except (ev.MetricError, ValueError, FloatingPointError) as exc:
            failures.append(f"{name}: {exc}")
            continue
        write_json(out / f"{name}.json", {**header, **doc})
    if failures:
        for f in failures:
            print(f"metric failed: {f}", file=sys.stderr)
        return EXIT_METRIC
    print(f"wrote {', '.join(metrics)} to {out}")
    return EXIT_OK


def _run_metric(name, model, cfg, train_set: Dataset, test_set: Dataset, out: Path) -> dict:
    e = cfg["eval"]
    if name == "knn":
        rep = ev.knn_report(ev.encode_dataset(model, test_set), e["k"], test_set.num_classes)
        write_csv(out / "knn_confusion.csv", [f"neighbor_{c}" for c in range(test_set.num_classes)],
                  [[repr(float(v)) for v in row] for row in rep.confusion])
        return rep.to_json()
    if name == "ood":
        sets = ood_sets(cfg, test_set.sample_shape)
        if not sets:
            raise ev.MetricError("no out-of-distribution source configured ([data] ood)")
        res = {}
        for src, imgs in sets.items():
            for kind in e["ood_kinds"]:
                res[f"{src}/{kind}"] = ev.ood_scores(model, test_set, imgs, kind).auroc()
        return {"metric": "ood", "auroc": res}
    if name == "fewlabel":
        tr, te = ev.encode_dataset(model, train_set), ev.encode_dataset(model, test_set)
        rows = [ev.few_label_probe(tr, te, pc if pc == "full" else int(pc), e["repeats"], cfg.seed).to_json()
                for pc in e["per_class"]]
        return {"metric": "fewlabel", "results": rows}
    if name == "collapse":
        if isinstance(model, BaselineEbm):
            raise ev.MetricError("collapse metrics need a latent-variable model")
        (rng,) = spawn(cfg.seed, "collapse")
        return ev.collapse_metrics(model, test_set, rng, e["mc_batch"], e["resamples"]).to_json()
    raise ev.MetricError(f"unknown metric {name!r}")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cebm", description="Conjugate energy-based models")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train a model from a config")
    p.add_argument("--config", required=True)
    p = sub.add_parser("sample", help="draw SGLD samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--metrics", type=_words, default=None, help="comma list from knn,ood,fewlabel,collapse")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config)
        if args.command == "sample":
            return cmd_sample(args.ckpt, args.steps, args.count, args.out, args.seed)
        return cmd_eval(args.ckpt, args.config, args.metrics)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, SgldDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
