"""Pipeline stages. Each reads artifacts from disk and writes new ones.

Outputs are pure functions of the inputs and the seed, so rerunning a
stage rewrites identical bytes.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .. import attack as atk
from .. import metrics
from ..data import DataConfig, config_hash, generate_dataset, load_manifest, load_sample_with_meta, load_split, \
    save_sample
from ..defense import DefenseConfig, DefenseDiverged, logit_scale, params_digest, reparameterize_neck, train_defense
from ..model import HEADS, ModelConfig, PretrainConfig, PromptSegModel, load_checkpoint, predict_mask, pretrain, \
    save_checkpoint
from ..numerics.bundle import write_bytes_atomic
from ..numerics.tensor import FormatError
from .config import CHUNK, StageError, dump_json, file_hash, require, workers


def _map_chunks(fn, items, *args):
    """Apply ``fn(chunk, *args)`` over fixed-size chunks, in a process pool if workers > 1."""
    chunks = [items[i:i + CHUNK] for i in range(0, len(items), CHUNK)]
    n = workers()
    if n > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(min(n, len(chunks))) as pool:
            parts = list(pool.map(fn, chunks, *[[a] * len(chunks) for a in args]))
    else:
        parts = [fn(c, *args) for c in chunks]
    return [x for part in parts for x in part]


def _load_model(path):
    require(path, "model checkpoint")
    try:
        return load_checkpoint(path)
    except (FormatError, KeyError, TypeError) as exc:
        raise StageError("bad_artifact", f"{path}: {exc}", path) from None


def _provenance(meta: dict, path) -> dict:
    prov = meta.get("provenance")
    if not prov:
        raise StageError("bad_artifact", f"{path}: no provenance record", path)
    return prov


# ---------------------------------------------------------------- gen-data

def gen_data(seed: int, n: int, out, config: DataConfig = DataConfig()) -> dict:
    if n < 10:
        raise StageError("bad_flag", f"--n must be at least 10, got {n}")
    manifest = generate_dataset(out, seed, n, config, workers())
    return {"stage": "gen-data", "out": str(out), "n": n, "data_hash": manifest["data_hash"]}


def _load_data(data_dir):
    require(Path(data_dir) / "manifest.json", "dataset manifest")
    return load_manifest(data_dir)


# ---------------------------------------------------------------- pretrain

def pretrain_stage(data_dir, out, config: PretrainConfig = PretrainConfig(),
                   model_config: ModelConfig = ModelConfig(), log=None) -> dict:
    manifest = _load_data(data_dir)
    train = load_split(data_dir, "train")
    seed = manifest["seed"]
    settings = {"data_hash": manifest["data_hash"], "model": model_config.to_dict(), "pretrain": asdict(config)}
    chash = config_hash(settings)
    model = PromptSegModel.create(model_config, seed)
    on_epoch = None if log is None else (lambda e, rec: log(json.dumps(rec, sort_keys=True)))
    trained, history = pretrain(model, train, config, on_epoch)
    trained.lineage = {"stage": "pretrain", "config_hash": chash}
    prov = dict(settings, stage="pretrain", seed=seed, config_hash=chash)
    # clean logit scale, the reference for an "auto" defense magnitude
    scale = logit_scale(trained, train)
    save_checkpoint(out, trained, {"provenance": prov, "history": history, "logit_scale": scale})
    return {"stage": "pretrain", "out": str(out), "config_hash": chash, "final_loss": history[-1]["loss"] if history else None}


# ---------------------------------------------------------------- attack

def _attack_chunk(samples, model, config, kind, seed):
    return atk.run_attack_batch(model, samples, config, kind, seed=seed)


def attack_stage(model_path, data_dir, kind: str, config: atk.AttackConfig, out, split: str = "val",
                 seed: int | None = None) -> dict:
    if kind not in atk.ATTACK_KINDS:
        raise StageError("bad_flag", f"--kind must be one of {list(atk.ATTACK_KINDS)}, got {kind!r}")
    model, meta, _ = _load_model(model_path)
    prov = _provenance(meta, model_path)
    manifest = _load_data(data_dir)
    if prov["data_hash"] != manifest["data_hash"]:
        raise StageError("mixed_provenance", f"model {model_path} was trained on data {prov['data_hash']}, "
                         f"dataset {data_dir} is {manifest['data_hash']}", data_dir)
    try:
        config.validate(model.config.num_features)
    except ValueError as exc:
        raise StageError("bad_flag", str(exc)) from None
    seed = manifest["seed"] if seed is None else seed
    samples = load_split(data_dir, split)
    model_hash = file_hash(model_path)
    settings = {"stage": "attack", "kind": kind, "config": asdict(config), "split": split, "seed": seed,
                "data_hash": manifest["data_hash"], "model_hash": model_hash}
    chash = config_hash(settings)
    results = _map_chunks(_attack_chunk, samples, model, config, kind, seed)
    out = Path(out)
    (out / "adv").mkdir(parents=True, exist_ok=True)
    plans = {}
    for s, r in zip(samples, results):
        atk.check_budget(s.image, r.adv_image, config.epsilon)
        save_sample(out / "adv" / f"{s.id}.smp", replace(s, image=r.adv_image), config_hash=chash, seed=seed,
                    attack=atk.provenance(kind, config, r.plan, seed))
        if r.plan is not None:
            plans[s.id] = r.plan.to_dict()
    outcomes = [r.outcome for r in results]
    record = dict(settings, config_hash=chash, n=len(samples), asr=metrics.asr(outcomes),
                  defended=model.reparam is not None, plans=plans,
                  provenance=atk.provenance(kind, config, None, seed))
    write_bytes_atomic(out / "outcomes.csv", metrics.outcomes_to_csv(outcomes, _csv_prov(record)).encode())
    write_bytes_atomic(out / "attack.json", dump_json(record))
    return {"stage": "attack", "out": str(out), "kind": kind, "epsilon": config.epsilon, "asr": record["asr"],
            "config_hash": chash}


def _csv_prov(record: dict) -> dict:
    return {"config_hash": record["config_hash"], "seed": record["seed"], "kind": record["kind"],
            "epsilon": repr(record["config"]["epsilon"]), "defended": int(record["defended"]),
            "data_hash": record["data_hash"], "split": record["split"]}


def load_adv_dir(adv_dir):
    adv_dir = Path(adv_dir)
    rec_path = require(adv_dir / "attack.json", "attack record")
    record = json.loads(rec_path.read_text())
    samples = []
    for path in sorted((adv_dir / "adv").glob("*.smp")):
        s, meta = load_sample_with_meta(path)
        if meta.get("config_hash") != record["config_hash"]:
            raise StageError("mixed_provenance", f"{path} has config hash {meta.get('config_hash')}, "
                             f"attack record says {record['config_hash']}", path)
        samples.append(s)
    if len(samples) != record["n"]:
        raise StageError("missing_artifact", f"{adv_dir}: expected {record['n']} adversarial samples, "
                         f"found {len(samples)}", adv_dir / "adv")
    return record, samples


# ---------------------------------------------------------------- defend

def defend_stage(model_path, adv_dir, out, config: DefenseConfig = DefenseConfig(), log=None) -> dict:
    model, meta, _ = _load_model(model_path)
    prov = _provenance(meta, model_path)
    if model.reparam is not None:
        raise StageError("bad_artifact", f"{model_path} is already a defended model", model_path)
    record, adv = load_adv_dir(adv_dir)
    base_hash = file_hash(model_path)
    if record["model_hash"] != base_hash:
        raise StageError("mixed_provenance", f"{adv_dir} was generated against model {record['model_hash']}, "
                         f"not {model_path} ({base_hash})", adv_dir)
    if record["kind"] != "cpa" or record["split"] != "train":
        raise StageError("bad_artifact", f"{adv_dir}: defense trains on CPA examples of the train split, got "
                         f"{record['kind']} on {record['split']}", adv_dir)
    if record["data_hash"] != prov["data_hash"]:
        raise StageError("mixed_provenance", f"{adv_dir} data {record['data_hash']} != model data "
                         f"{prov['data_hash']}", adv_dir)
    try:
        config.validate()
    except ValueError as exc:
        raise StageError("bad_flag", str(exc)) from None
    if config.magnitude == "auto" and "logit_scale" not in meta:
        raise StageError("bad_artifact", f"{model_path} records no clean logit scale; pass --magnitude", model_path)
    reparam_model, _ = reparameterize_neck(model)
    frozen = params_digest(reparam_model)
    on_epoch = None if log is None else (lambda e, rec, _m: log(json.dumps(rec, sort_keys=True)))
    try:
        robust, history, opt_state = train_defense(reparam_model, adv, config, on_epoch, meta.get("logit_scale"))
    except DefenseDiverged as exc:
        for name, p in exc.last_good.items():
            reparam_model.reparam.layers[name].p[...] = p
        save_checkpoint(str(out) + ".last_good", reparam_model, {"provenance": dict(prov, stage="defend-aborted")})
        raise StageError("diverged", f"{exc}; last good singular values saved to {out}.last_good", out) from None
    if params_digest(robust) != frozen:
        raise StageError("frozen_violation", "defense training modified frozen parameters")
    settings = {"stage": "defend", "base_model": base_hash, "adv_config_hash": record["config_hash"],
                "data_hash": prov["data_hash"], "defense": config.to_dict()}
    chash = config_hash(settings)
    robust.lineage = {"stage": "defend", "base_model": base_hash, "config_hash": chash}
    new_prov = dict(settings, seed=prov["seed"], config_hash=chash, base_provenance=prov)
    extra = {f"opt.{k}": v for k, v in sorted(opt_state.items()) if isinstance(v, np.ndarray)}
    scalars = {k: v for k, v in opt_state.items() if not isinstance(v, np.ndarray)}
    save_checkpoint(out, robust, {"provenance": new_prov, "history": history, "optimizer": scalars}, extra)
    return {"stage": "defend", "out": str(out), "config_hash": chash, "trainable": robust.reparam.trainable_count,
            "final_loss": history[-1]["loss"] if history else None}


# ---------------------------------------------------------------- eval

def _gt_chunk(samples, model):
    images = np.stack([s.image for s in samples])
    rows = []
    masks = {k: predict_mask(model, images, [s.prompt(k) for s in samples]) for k in HEADS}
    for i, s in enumerate(samples):
        rows.append({k: metrics.miou(masks[k][i], s.gt_mask) for k in HEADS})
    return rows


def _outcome_chunk(pairs, model):
    clean = np.stack([c.image for c, _ in pairs])
    adv = np.stack([a.image for _, a in pairs])
    return atk.outcomes_for(model, [c for c, _ in pairs], clean, adv)


def eval_stage(model_path, data_dir, adv_dir=None, split: str = "val", out=None) -> dict:
    model, meta, _ = _load_model(model_path)
    prov = _provenance(meta, model_path)
    manifest = _load_data(data_dir)
    hashes = {"model": prov["data_hash"], "data": manifest["data_hash"]}
    record = None
    if adv_dir is not None:
        record, adv = load_adv_dir(adv_dir)
        hashes["adv"] = record["data_hash"]
        split = record["split"]
    if len(set(hashes.values())) != 1:
        raise StageError("mixed_provenance", "refusing mixed data hashes: "
                         + ", ".join(f"{k}={v}" for k, v in sorted(hashes.items())))
    clean = load_split(data_dir, split)
    defended = model.reparam is not None
    summary = {"stage": "eval", "model_hash": file_hash(model_path), "data_hash": manifest["data_hash"],
               "seed": prov["seed"], "split": split, "defended": defended, "n": len(clean)}
    if record is None:
        rows = _map_chunks(_gt_chunk, clean, model)
        summary["attack"] = "clean"
        for k in HEADS:
            summary[f"miou_gt_{k}"] = float(np.mean([r[k] for r in rows]))
        outcomes = None
    else:
        by_id = {s.id: s for s in clean}
        missing = [s.id for s in adv if s.id not in by_id]
        if missing:
            raise StageError("mixed_provenance", f"adversarial ids not in {split} split: {missing[:3]}", adv_dir)
        pairs = [(by_id[s.id], s) for s in adv]
        outcomes = _map_chunks(_outcome_chunk, pairs, model)
        summary.update(attack=record["kind"], epsilon=record["config"]["epsilon"], adv_config_hash=record["config_hash"],
                       asr=metrics.asr(outcomes), n=len(outcomes))
        for k in HEADS:
            summary[f"miou_gt_{k}"] = float(np.mean([getattr(o, f"miou_gt_{k}") for o in outcomes]))
            summary[f"q_{k}"] = float(np.mean([getattr(o, f"q_{k}") for o in outcomes]))
    summary["config_hash"] = config_hash(summary)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_bytes_atomic(out / "eval.json", dump_json(summary))
        if outcomes is not None:
            csv_prov = {"config_hash": summary["config_hash"], "seed": summary["seed"], "kind": summary["attack"],
                        "epsilon": repr(summary["epsilon"]), "defended": int(defended),
                        "data_hash": summary["data_hash"], "split": split}
            write_bytes_atomic(out / "outcomes.csv", metrics.outcomes_to_csv(outcomes, csv_prov).encode())
    return summary
