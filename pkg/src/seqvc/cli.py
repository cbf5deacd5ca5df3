"""Command-line pipeline driver.

Verbs: gen-data, pretrain-tts, pretrain-asr, train-vc, convert, evaluate,
gradcheck, inspect. Exit codes: 0 success, 1 contract error, 2 numeric
failure. The SEQVC_LOG environment variable (debug|info|quiet) controls
log verbosity only.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import checks
from .autodiff import no_grad
from .checkpoint import (Checkpoint, checkpoint_of, load_checkpoint,
                         load_into_model, save_checkpoint)
from .config import RunConfig, apply_override, derive_seed, load_config, save_config
from .data import CorpusGenSpec, generate_corpus, load_corpus, read_features, write_features
from .errors import ContractError, NumericError
from .metrics import McdConfig, cluster_score, diagonality, error_rate, map_labels_to_hidden, mcd
from .models import build_model, decode_autoregressive, decode_text, encode
from .pretrain import (StagePlan, run_asr_decoder_stage, run_asr_encoder_stage,
                       run_tts_decoder_stage, run_tts_encoder_stage, run_vc_stage)
from .training import write_trace

log = logging.getLogger("seqvc")


def _setup_logging():
    level = os.environ.get("SEQVC_LOG", "info").lower()
    table = {"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.ERROR}
    logging.basicConfig(level=table.get(level, logging.INFO),
                        format="%(levelname)s %(message)s")


def _parser():
    p = argparse.ArgumentParser(prog="seqvc", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("gen-data", "pretrain-tts", "pretrain-asr", "train-vc",
                 "convert", "evaluate", "gradcheck", "inspect"):
        sp = sub.add_parser(verb)
        sp.add_argument("--config", default=None, help="run-config JSON path")
        sp.add_argument("--out", default="runs/default", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the root seed")
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="config override, repeatable (e.g. model.d_model=16)")
        if verb == "inspect":
            sp.add_argument("--ckpt", default=None, help="checkpoint to describe")
    return p


def main(argv=None):
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


def dispatch(argv) -> int:
    _setup_logging()
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        cfg = load_config(args.config)
        for item in args.set:
            if "=" not in item:
                raise ContractError(f"--set expects PATH=VALUE, got {item!r}")
            dotted, _, raw = item.partition("=")
            apply_override(cfg, dotted, raw)
        if args.seed is not None:
            cfg.seed = args.seed
        os.makedirs(args.out, exist_ok=True)
        handler = _VERBS[args.verb]
        return handler(cfg, args.out, args) or 0
    except ContractError as e:
        log.error("contract error: %s", e)
        return 1
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return 2
    except FileNotFoundError as e:
        log.error("missing file: %s", e)
        return 1


# ---------------------------------------------------------------------------
# paths

def _data_dir(cfg, out):
    return os.path.join(out, cfg.data.root)


def _manifest(cfg, out, which):
    return os.path.join(_data_dir(cfg, out), getattr(cfg.data, f"{which}_manifest"))


def _ckpt_path(cfg, out, name):
    return os.path.join(out, cfg.paths.ckpt_dir, getattr(cfg.paths, name))


def _trace_path(cfg, out, stage):
    return os.path.join(out, cfg.paths.trace_dir, f"{stage}.csv")


def _save_stage(cfg, out, stage, result):
    ckpt_file = _ckpt_path(cfg, out, f"{stage}_ckpt") if hasattr(cfg.paths, f"{stage}_ckpt") \
        else os.path.join(out, cfg.paths.ckpt_dir, f"{stage}.ckpt")
    os.makedirs(os.path.dirname(ckpt_file), exist_ok=True)
    save_checkpoint(result.checkpoint, ckpt_file)
    os.makedirs(os.path.join(out, cfg.paths.trace_dir), exist_ok=True)
    write_trace(_trace_path(cfg, out, stage), result.fit.trace)
    log.info("%s: %d steps -> %s", stage, result.fit.steps, ckpt_file)
    return ckpt_file


# ---------------------------------------------------------------------------
# verbs

def cmd_gen_data(cfg: RunConfig, out, args):
    g = cfg.gen
    root = _data_dir(cfg, out)
    common = dict(feat_dim=g.feat_dim, noise_level=g.noise_level,
                  min_symbols=g.min_symbols, max_symbols=g.max_symbols)
    specs = {
        "tts": CorpusGenSpec("tts", g.tts_utterances, g.tts_val, g.tts_eval,
                             n_speakers=1, seed=derive_seed(cfg.seed, "data.tts"),
                             **common),
        "asr": CorpusGenSpec("asr", g.asr_utterances, g.asr_val, g.asr_eval,
                             n_speakers=g.asr_speakers, parallel=False,
                             seed=derive_seed(cfg.seed, "data.asr"), **common),
        "vc": CorpusGenSpec("vc", g.vc_utterances, g.vc_val, g.vc_eval,
                            n_speakers=2, seed=derive_seed(cfg.seed, "data.vc"),
                            **common),
    }
    for name, spec in specs.items():
        manifest = generate_corpus(spec, os.path.join(root, name))
        log.info("wrote %s", manifest)
    save_config(cfg, os.path.join(out, "config.resolved.json"))
    return 0


def cmd_pretrain_tts(cfg: RunConfig, out, args):
    corpus = load_corpus(_manifest(cfg, out, "tts"))
    plan = StagePlan("tts_dec", steps=cfg.budgets.tts_dec, weights=cfg.loss,
                     seed=derive_seed(cfg.seed, "fit.tts_dec"))
    a1 = run_tts_decoder_stage(corpus, cfg.model, plan, cfg.optimizer, cfg.train,
                               model_seed=derive_seed(cfg.seed, "model.tts_dec"))
    _save_stage(cfg, out, "tts_dec", a1)
    plan = StagePlan("tts_enc", steps=cfg.budgets.tts_enc, weights=cfg.loss,
                     seed=derive_seed(cfg.seed, "fit.tts_enc"))
    a2 = run_tts_encoder_stage(corpus, a1.checkpoint, cfg.model, plan,
                               cfg.optimizer, cfg.train,
                               model_seed=derive_seed(cfg.seed, "model.tts_enc"))
    _save_stage(cfg, out, "tts_enc", a2)
    return 0


def cmd_pretrain_asr(cfg: RunConfig, out, args):
    asr_corpus = load_corpus(_manifest(cfg, out, "asr"))
    tts_corpus = load_corpus(_manifest(cfg, out, "tts"))
    plan = StagePlan("asr_enc", steps=cfg.budgets.asr_enc, weights=cfg.loss,
                     seed=derive_seed(cfg.seed, "fit.asr_enc"))
    b1 = run_asr_encoder_stage(asr_corpus, cfg.model, plan, cfg.optimizer, cfg.train,
                               model_seed=derive_seed(cfg.seed, "model.asr_enc"))
    _save_stage(cfg, out, "asr_enc", b1)
    tts_dec = load_checkpoint(_ckpt_path(cfg, out, "tts_dec_ckpt"))
    plan = StagePlan("asr_dec", steps=cfg.budgets.asr_dec, weights=cfg.loss,
                     seed=derive_seed(cfg.seed, "fit.asr_dec"))
    b2 = run_asr_decoder_stage(tts_corpus, b1.checkpoint, tts_dec, cfg.model, plan,
                               cfg.optimizer, cfg.train,
                               model_seed=derive_seed(cfg.seed, "model.asr_dec"))
    _save_stage(cfg, out, "asr_dec", b2)
    return 0


def _init_ckpt(cfg, out, side: str):
    source = getattr(cfg.vc_init, side)
    if source == "none":
        return None
    name = {"encoder": {"tts": "tts_enc_ckpt", "asr": "asr_enc_ckpt"},
            "decoder": {"tts": "tts_dec_ckpt", "asr": "asr_dec_ckpt"}}[side][source]
    return load_checkpoint(_ckpt_path(cfg, out, name))


def cmd_train_vc(cfg: RunConfig, out, args):
    corpus = load_corpus(_manifest(cfg, out, "vc"))
    plan = StagePlan("vc", steps=cfg.budgets.vc, weights=cfg.loss,
                     seed=derive_seed(cfg.seed, "fit.vc"))
    result = run_vc_stage(corpus, cfg.model, plan, cfg.optimizer, cfg.train,
                          model_seed=derive_seed(cfg.seed, "model.vc"),
                          source=cfg.data.vc_source, target=cfg.data.vc_target,
                          enc_ckpt=_init_ckpt(cfg, out, "encoder"),
                          dec_ckpt=_init_ckpt(cfg, out, "decoder"))
    _save_stage(cfg, out, "vc", result)
    if result.fit.aborted:
        raise NumericError("vc training aborted on a non-finite loss")
    return 0


def _load_model(ckpt: Checkpoint):
    model = build_model(ckpt.config, ckpt.seed)
    load_into_model(model, ckpt)
    return model


def _write_pgm(path, matrix):
    m = np.asarray(matrix, dtype=np.float64)
    peak = m.max()
    scaled = np.zeros_like(m) if peak <= 0 else m / peak
    img = (255 * scaled).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    with open(path, "wb") as f:
        f.write(header + img.tobytes())


def _write_csv(path, matrix):
    lines = [",".join(repr(float(v)) for v in row) for row in np.asarray(matrix)]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _read_csv(path):
    with open(path) as f:
        return np.array([[float(v) for v in line.split(",")]
                         for line in f.read().strip().split("\n")])


def _attention_maps(result):
    """Flatten a DecodeResult's cross-attention into (tag, map) pairs."""
    cross = result.attention["cross"]
    if isinstance(cross, np.ndarray):
        return [("rnn", cross)]
    return [(f"L{li}H{hi}", m) for li, heads in enumerate(cross)
            for hi, m in enumerate(heads)]


def cmd_convert(cfg: RunConfig, out, args):
    ckpt = load_checkpoint(_ckpt_path(cfg, out, "vc_ckpt"))
    model = _load_model(ckpt)
    corpus = load_corpus(_manifest(cfg, out, "vc"))
    split = cfg.paths.convert_split
    utts = corpus.split(split, cfg.data.vc_source)
    if not utts:
        raise ContractError(f"no {split} utterances for speaker {cfg.data.vc_source}")
    conv_dir = os.path.join(out, cfg.paths.converted_dir)
    attn_dir = os.path.join(conv_dir, "attn")
    os.makedirs(attn_dir, exist_ok=True)
    index = []
    with no_grad():
        for u in utts:
            memory = encode(model, u.features)
            result = decode_autoregressive(model, memory)
            feat_path = os.path.join(conv_dir, f"{u.id}.bin")
            write_features(feat_path, result.features)
            maps = []
            for tag, m in _attention_maps(result):
                base = os.path.join(attn_dir, f"{u.id}.{tag}")
                _write_pgm(base + ".pgm", m)
                _write_csv(base + ".csv", m)
                maps.append(f"attn/{u.id}.{tag}.csv")
            index.append({"id": u.id, "frames": int(result.features.shape[0]),
                          "stopped_by": result.stopped_by, "path": f"{u.id}.bin",
                          "maps": maps})
    with open(os.path.join(conv_dir, "index.json"), "w") as f:
        json.dump({"split": split, "source": cfg.data.vc_source,
                   "target": cfg.data.vc_target, "utterances": index},
                  f, indent=1, sort_keys=True)
        f.write("\n")
    by_threshold = sum(1 for e in index if e["stopped_by"] == "threshold")
    log.info("converted %d utterances (%d stopped by threshold)", len(index), by_threshold)
    return 0


def cmd_evaluate(cfg: RunConfig, out, args):
    conv_dir = os.path.join(out, cfg.paths.converted_dir)
    index_path = os.path.join(conv_dir, "index.json")
    if not os.path.exists(index_path):
        raise ContractError(f"{index_path} not found; run convert first")
    with open(index_path) as f:
        index = json.load(f)
    corpus = load_corpus(_manifest(cfg, out, "vc"))
    split, target_spk = index["split"], index["target"]
    targets = {u.id: u for u in corpus.split(split, target_spk)}
    sources = {u.id: u for u in corpus.split(split, index["source"])}

    order = min(cfg.eval.mcd_order, corpus.feat_dim - 1)
    mcd_cfg = McdConfig(order=order, silence_db=cfg.eval.silence_db)
    asr_path = _ckpt_path(cfg, out, "asr_enc_ckpt")
    asr_model = _load_model(load_checkpoint(asr_path)) if os.path.exists(asr_path) else None
    vc_model = _load_model(load_checkpoint(_ckpt_path(cfg, out, "vc_ckpt")))

    per_utt = {}
    total_edit = 0
    total_ref = 0
    diags = []
    reps, labels = [], []
    stopped = 0
    with no_grad():
        for entry in index["utterances"]:
            uid = entry["id"]
            conv = read_features(os.path.join(conv_dir, entry["path"]))
            tgt = targets[uid]
            row = {"mcd": mcd(conv, tgt.features, mcd_cfg),
                   "stopped_by": entry["stopped_by"]}
            stopped += entry["stopped_by"] == "threshold"
            if asr_model is not None:
                hyp = decode_text(asr_model, encode(asr_model, conv))
                ref = [int(s) for s in tgt.symbols]
                dist, rate = error_rate(hyp, ref)
                total_edit += dist
                total_ref += len(ref)
                row["symbol_errors"] = dist
                row["symbol_error_rate"] = rate
            row["diagonality"] = float(np.mean(
                [diagonality(_read_csv(os.path.join(conv_dir, rel)))
                 for rel in entry["maps"]]))
            diags.append(row["diagonality"])
            per_utt[uid] = row
            src = sources[uid]
            hidden = encode(vc_model, src.features).numpy()
            reps.append(hidden)
            labels.append(map_labels_to_hidden(src.labels, hidden.shape[0]))
    silhouette, projection, kept = cluster_score(
        np.vstack(reps), np.concatenate(labels), top_k=cfg.eval.cluster_top_k,
        exclude=(corpus.inventory.silence_id,))
    _write_csv(os.path.join(out, "encoder_projection.csv"),
               np.column_stack([projection, kept]))
    report = {
        "split": split,
        "mcd_mean": float(np.mean([r["mcd"] for r in per_utt.values()])),
        "mcd_order": order,
        "diagonality_mean": float(np.mean(diags)),
        "silhouette": silhouette,
        "stopped_by_threshold_fraction": stopped / max(len(per_utt), 1),
        "per_utterance": per_utt,
    }
    if asr_model is not None:
        report["symbol_error_rate"] = total_edit / max(total_ref, 1)
    report_path = os.path.join(out, cfg.paths.report)
    with open(report_path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    log.info("report -> %s", report_path)
    return 0


def cmd_gradcheck(cfg: RunConfig, out, args):
    rows = checks.layer_checks() + checks.loss_checks()
    width = max(len(name) for name, _ in rows)
    failed = False
    for name, report in rows:
        status = "PASS" if report.passed else "FAIL"
        failed = failed or not report.passed
        print(f"{name:<{width}}  max_rel_err={report.max_rel_err:.3e}  "
              f"checked={report.n_checked:5d}  skipped={report.n_skipped:3d}  {status}")
    if failed:
        log.error("gradient checks failed")
        return 2
    return 0


def cmd_inspect(cfg: RunConfig, out, args):
    path = args.ckpt or _ckpt_path(cfg, out, "vc_ckpt")
    ckpt = load_checkpoint(path)
    total = sum(int(np.prod(a.shape)) for a in ckpt.params.values())
    print(f"checkpoint: {path}")
    print(f"version: {ckpt.version}  step: {ckpt.step}  seed: {ckpt.seed}")
    print(f"model: {ckpt.config.architecture}/{ckpt.config.task}  "
          f"d_model={ckpt.config.d_model} layers={ckpt.config.layers} "
          f"heads={ckpt.config.heads} r={ckpt.config.r} feat_dim={ckpt.config.feat_dim}")
    print(f"parameters: {len(ckpt.params)} tensors, {total} values")
    enc = sum(1 for p in ckpt.params if p.startswith("encoder."))
    dec = sum(1 for p in ckpt.params if p.startswith("decoder."))
    print(f"subtrees: encoder {enc}, decoder {dec}")
    if ckpt.optimizer:
        print(f"optimizer: {ckpt.optimizer['name']} at step {ckpt.optimizer['step']}")
    return 0


_VERBS = {
    "gen-data": cmd_gen_data,
    "pretrain-tts": cmd_pretrain_tts,
    "pretrain-asr": cmd_pretrain_asr,
    "train-vc": cmd_train_vc,
    "convert": cmd_convert,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


if __name__ == "__main__":
    main()
