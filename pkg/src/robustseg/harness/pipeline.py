"""Full experiment as a sequence of CLI stages, mostly for tests and the README."""

from __future__ import annotations

import json
import time
from pathlib import Path

from .cli import run_command
from .config import ExperimentConfig, dump_json, eps_label
from ..numerics.bundle import write_bytes_atomic


class PipelineError(RuntimeError):
    pass


def layout(out) -> dict:
    out = Path(out)
    return {"data": out / "data", "model": out / "model.ckpt", "robust": out / "robust.ckpt",
            "attacks": out / "attacks", "evals": out / "evals", "train_adv": out / "train-adv",
            "report": out / "report" / "results.csv"}


def run_pipeline(cfg: ExperimentConfig, out=None) -> dict:
    """gen-data, pretrain, attacks on val, CPA on train, defend, evals and report under ``out``.

    Returns the artifact paths and per-stage wall-clock seconds (kept out of
    the artifacts so reruns stay byte-identical).
    """
    paths = layout(out or cfg.out)
    root = paths["data"].parent
    root.mkdir(parents=True, exist_ok=True)
    cfg_file = root / "experiment.json"
    write_bytes_atomic(cfg_file, dump_json(dict(cfg.to_dict(), out=".", config_hash=cfg.hash())))
    timings = {}

    def run(*argv):
        start = time.perf_counter()
        status = run_command(["--config", str(cfg_file), *map(str, argv)])
        if status != 0:
            raise PipelineError(f"stage failed with status {status}: {' '.join(map(str, argv))}")
        timings[argv[0]] = timings.get(argv[0], 0.0) + time.perf_counter() - start

    a = cfg.attack
    data, model, robust = paths["data"], paths["model"], paths["robust"]
    common = ["--steps", a.steps, "--k", a.k]
    run("gen-data", "--seed", cfg.seed, "--n", cfg.n, "--out", data)
    run("pretrain", "--data", data, "--out", model)
    adv_dirs = {}
    for kind in cfg.kinds:
        for eps in cfg.eps:
            d = paths["attacks"] / f"{kind}-e{eps_label(eps)}"
            run("attack", "--model", model, "--data", data, "--kind", kind, "--eps", repr(eps), "--out", d, *common)
            adv_dirs[(kind, eps)] = d
    run("attack", "--model", model, "--data", data, "--kind", "cpa", "--eps", repr(a.epsilon), "--split", "train",
        "--out", paths["train_adv"], *common)
    run("defend", "--model", model, "--adv", paths["train_adv"], "--out", robust)
    for (kind, eps), d in adv_dirs.items():
        run("eval", "--model", robust, "--data", data, "--adv", d,
            "--out", paths["evals"] / f"{kind}-e{eps_label(eps)}-defended")
    for tag, ckpt in (("undefended", model), ("defended", robust)):
        run("eval", "--model", ckpt, "--data", data, "--out", paths["evals"] / f"clean-{tag}")
    status = run_command(["--config", str(cfg_file), "report", "--in", str(root), "--out", str(paths["report"])])
    if status not in (0, 3):
        raise PipelineError(f"report failed with status {status}")
    out = {k: str(v) for k, v in paths.items()}
    out["timings"] = timings
    return out


def read_eval(path) -> dict:
    return json.loads((Path(path) / "eval.json").read_text())
