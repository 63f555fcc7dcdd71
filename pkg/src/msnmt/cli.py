"""``msnmt`` command line: synth-data, train, translate, evaluate, adversarial,
analyze-entities and grad-check.

Every command writes ``manifest.json`` into its output directory before any
other artifact. Errors print ``error: ...`` and exit with status 2; a failed
gradient check exits with status 1.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .config import ConfigError, load_config, model_config, synthetic_spec
from .data import (
    DataFormatError,
    SentencePair,
    Vocab,
    build_vocab,
    encode_batch,
    generate_synthetic_dataset,
    load_entity_annotations,
    load_image_features,
    load_parallel_corpus,
    read_sentences,
    save_entity_annotations,
    save_image_features,
    save_vocab,
    write_parallel_corpus,
)
from .decoding import check_policy, read_tokens, read_traces, translate_pairs, write_hypotheses
from .evaluation import (
    adversarial_eval,
    average_reports,
    bleu,
    bootstrap_significance,
    corpus_al,
    entity_report,
    update_plot_csv,
    write_report,
)
from .model import CheckpointError, ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .policy import Policy
from .tensor import ContractError, ShapeError
from .training import TrainConfig, TrainingDiverged, prefix_loss, save_report, train_stage

log = logging.getLogger("msnmt")

GRAD_TOLERANCE = 1e-4
CHECKPOINT_NAME = "model.ckpt"


# ------------------------------------------------------------------ manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    checkpoint: str | None
    inputs: dict[str, str] = field(default_factory=dict)
    argv: list[str] = field(default_factory=list)
    version: str = __version__

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def fingerprints(paths: Sequence) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is None or p == "zeros":
            continue
        if not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        out[str(p)] = sha256_file(p)
    return out


def _jsonable(cfg: dict) -> dict:
    return json.loads(json.dumps(cfg, default=str))


# ---------------------------------------------------------------- helpers


def _vocab_from_meta(meta: dict) -> Vocab:
    if "vocab" not in meta:
        raise CheckpointError("checkpoint carries no vocabulary")
    return Vocab(meta["vocab"])


def _load_store(path, config: ModelConfig):
    store = load_image_features(path, expected_dim=config.feature_dim)
    if store.m != config.image_len:
        raise ShapeError(f"{path}: {store.m} regions per image, model expects {config.image_len}")
    return store


def _source_pairs(src_path, images_path=None, ref_path=None) -> list[SentencePair]:
    if ref_path is not None:
        return load_parallel_corpus(src_path, ref_path, images_path, max_len=None)
    src = read_sentences(src_path)
    ids = [str(i) for i in range(len(src))]
    if images_path is not None:
        ids = [line.strip() for line in Path(images_path).read_text(encoding="utf-8").splitlines()]
        if len(ids) != len(src):
            raise DataFormatError(f"line count mismatch: {images_path} has {len(ids)}, {src_path} has {len(src)}")
    return [SentencePair(s, [], str(i), img) for i, (s, img) in enumerate(zip(src, ids))]


def _decode_features(params: ModelParams, features: str | None):
    """Map ``--features`` onto (feature mode, store) and enforce modality consistency."""
    cfg = params.config
    if not cfg.multimodal:
        if features is not None:
            raise ContractError("checkpoint is a text-only model but image features were given")
        return "none", None
    if features is None:
        raise ContractError("checkpoint is a multimodal model: pass --features PATH or --features zeros")
    if features == "zeros":
        return "zeros", None
    return "real", _load_store(features, cfg)


# ---------------------------------------------------------------- commands


def cmd_synth_data(args) -> int:
    cfg = load_config(args.config, overrides={"synth.size": args.size, "synth.test_size": args.test_size})
    spec = synthetic_spec(cfg)
    test_size = cfg["synth"]["test_size"]
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    RunManifest("synth-data", _jsonable(cfg), seed, None, fingerprints([args.config]), list(args.argv)).write(out)
    spec.size += test_size
    ds = generate_synthetic_dataset(spec, seed)
    spec.size -= test_size
    for name, part in (("train", ds.split(0, spec.size)), ("test", ds.split(spec.size, spec.size + test_size))):
        write_parallel_corpus(part.pairs, out / f"{name}.src", out / f"{name}.tgt", out / f"{name}.img")
        save_entity_annotations(part.annotations, out / f"{name}.ent")
    save_image_features(ds.features, out / "features.bin")
    print(f"wrote {spec.size} train and {test_size} test pairs to {out}")
    return 0


def _train_config(tc: dict, batch_size: int, patience: int) -> TrainConfig:
    return TrainConfig(
        lr=tc["lr"], batch_size=batch_size, patience=patience, policy=str(tc["k"]),
        seed=tc["seed"], max_epochs=tc["max_epochs"], clip_norm=tc["clip_norm"],
    )


def cmd_train(args) -> int:
    overrides = {
        "train.k": args.policy_k, "train.seed": args.seed, "model.seed": args.seed,
        "model.precision": args.precision, "data.features": args.features,
    }
    cfg = load_config(args.config, overrides=overrides)
    data, tc = cfg["data"], cfg["train"]
    for key in ("train_src", "train_tgt", "dev_src", "dev_tgt"):
        if data[key] is None:
            raise ConfigError(f"missing config key [data] {key}")
    out = Path(args.out)
    ckpt = out / CHECKPOINT_NAME
    inputs = fingerprints([args.config] + [data[k] for k in
                          ("train_src", "train_tgt", "train_images", "dev_src", "dev_tgt", "dev_images", "features")])
    RunManifest("train", _jsonable(cfg), tc["seed"], str(ckpt), inputs, list(args.argv)).write(out)

    train = load_parallel_corpus(data["train_src"], data["train_tgt"], data["train_images"], data["max_len"])
    dev = load_parallel_corpus(data["dev_src"], data["dev_tgt"], data["dev_images"], data["max_len"])
    vocab = build_vocab([p.src for p in train] + [p.tgt for p in train], cap=cfg["model"]["vocab_size"])
    mcfg = model_config(cfg, vocab_size=len(vocab))
    params = init_params(mcfg)
    stages: list = []
    try:
        params = _run_training(params, train, dev, vocab, mcfg, data, tc, stages)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "last_good.ckpt", {"vocab": vocab.tokens(), "k": str(tc["k"]), "seed": tc["seed"]})
            raise TrainingDiverged(f"{exc}; last good checkpoint written to {out / 'last_good.ckpt'}") from None
        raise
    meta = {"vocab": vocab.tokens(), "k": str(tc["k"]), "seed": tc["seed"], "stages": [s for s, _ in stages]}
    save_checkpoint(params, ckpt, meta)
    save_vocab(vocab, out / "vocab.txt")
    save_report(stages, out / "train_report.jsonl")
    for stage, rep in stages:
        print(f"{stage}: best dev BLEU {rep.best_bleu:.2f} at epoch {rep.best_epoch} ({rep.stop_reason})")
    return 0


def _run_training(params, train, dev, vocab, mcfg, data, tc, stages) -> ModelParams:
    """Text-only: one stage. Multimodal: zero features, then real ones unless disabled."""
    if not mcfg.multimodal:
        if data["features"] is not None:
            raise ContractError("text-only model ([model] multimodal = false) cannot take image features")
        params, report = train_stage(params, train, dev, vocab, _train_config(tc, tc["batch_size"], tc["patience"]))
        stages.append(("text", report))
    else:
        features = data["features"]
        if features is None:
            raise ConfigError("multimodal training needs [data] features (a feature file or 'zeros')")
        params, report = train_stage(params, train, dev, vocab, _train_config(tc, tc["batch_size"], tc["pretrain_patience"]), "zeros")
        stages.append(("pretrain", report))
        if features != "zeros" and tc["finetune"]:
            store = _load_store(features, mcfg)
            ft = _train_config(tc, tc["finetune_batch_size"], tc["finetune_patience"])
            params, report = train_stage(params, train, dev, vocab, ft, "real", store)
            stages.append(("finetune", report))
    return params


def cmd_translate(args) -> int:
    out = Path(args.out)
    inputs = fingerprints([args.checkpoint, args.src, args.images, args.features])
    params, meta = load_checkpoint(args.checkpoint, args.precision)
    policy = Policy.parse(args.policy_k if args.policy_k is not None else meta.get("k", "full"))
    cfg = {"k": str(policy), "features": args.features, "precision": params.config.precision}
    RunManifest("translate", cfg, meta.get("seed"), str(args.checkpoint), inputs, list(args.argv)).write(out)
    check_policy(meta.get("k"), policy)
    vocab = _vocab_from_meta(meta)
    mode, store = _decode_features(params, args.features)
    pairs = _source_pairs(args.src, args.images)
    hyps = translate_pairs(params, vocab, pairs, policy, mode, store)
    write_hypotheses(hyps, vocab, out / "hyp.txt", out / "trace.txt")
    print(f"translated {len(hyps)} sentences with k={policy}")
    return 0


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    if args.average:
        RunManifest("evaluate", {"average": args.average}, None, None, fingerprints(args.average), list(args.argv)).write(out)
        write_report(average_reports(args.average), out / "report.ini")
        print(f"averaged {len(args.average)} reports")
        return 0
    if args.hyp is None or args.ref is None:
        raise ContractError("evaluate needs --hyp and --ref (or --average REPORT...)")
    seed = args.seed if args.seed is not None else 0
    cfg = {"resamples": args.resamples, "alpha": args.alpha, "system": args.system, "k": args.policy_k}
    RunManifest("evaluate", cfg, seed, None, fingerprints([args.hyp, args.ref, args.trace, args.compare]), list(args.argv)).write(out)
    hyps, refs = read_tokens(args.hyp), read_tokens(args.ref)
    if len(hyps) != len(refs):
        raise ContractError(f"line count mismatch: {args.hyp} has {len(hyps)}, {args.ref} has {len(refs)}")
    score = bleu(hyps, refs)
    sections: dict[str, dict] = {
        "bleu": {
            "score": score.score, "brevity_penalty": score.brevity_penalty,
            "precisions": list(score.precisions), "hyp_len": score.hyp_len, "ref_len": score.ref_len,
        }
    }
    al = None
    if args.trace is not None:
        traces = read_traces(args.trace)
        if len(traces) != len(hyps):
            raise ContractError(f"line count mismatch: {args.trace} has {len(traces)}, {args.hyp} has {len(hyps)}")
        for i, (tr, h) in enumerate(zip(traces, hyps)):
            if tr.target_len != len(h):
                raise ContractError(f"line {i + 1}: trace covers {tr.target_len} tokens, hypothesis has {len(h)}")
        al = corpus_al(traces).mean
        sections["al"] = {"average_lagging": al}
    if args.compare is not None:
        other = read_tokens(args.compare)
        if len(other) != len(refs):
            raise ContractError(f"line count mismatch: {args.compare} has {len(other)}, {args.ref} has {len(refs)}")
        sig = bootstrap_significance(hyps, other, refs, args.resamples, args.alpha, seed)
        sections["significance"] = {
            "bleu_a": sig.bleu_a, "bleu_b": sig.bleu_b, "difference": sig.difference,
            "p_value": sig.p_value, "significant": sig.significant, "alpha": sig.alpha, "resamples": sig.resamples,
        }
    write_report(sections, out / "report.ini")
    if args.system is not None and al is not None:
        update_plot_csv(out / "plot.csv", args.policy_k or "full", args.system, score.score, al)
    print(f"BLEU {score.score:.2f}" + ("" if al is None else f"  AL {al:.3f}"))
    if "significance" in sections:
        s = sections["significance"]
        print(f"p = {s['p_value']:.4f} ({'significant' if s['significant'] else 'not significant'} at alpha {args.alpha})")
    return 0


def cmd_adversarial(args) -> int:
    out = Path(args.out)
    seed = args.seed if args.seed is not None else 0
    inputs = fingerprints([args.checkpoint, args.src, args.ref, args.images, args.features])
    params, meta = load_checkpoint(args.checkpoint, args.precision)
    policy = Policy.parse(args.policy_k if args.policy_k is not None else meta.get("k", "full"))
    cfg = {"k": str(policy), "resamples": args.resamples, "alpha": args.alpha}
    RunManifest("adversarial", cfg, seed, str(args.checkpoint), inputs, list(args.argv)).write(out)
    if not params.config.multimodal:
        raise ContractError("adversarial evaluation needs a multimodal checkpoint")
    if args.features is None or args.features == "zeros":
        raise ContractError("adversarial evaluation needs a real feature file")
    vocab = _vocab_from_meta(meta)
    store = _load_store(args.features, params.config)
    pairs = _source_pairs(args.src, args.images, args.ref)
    res = adversarial_eval(params, vocab, pairs, store, policy, args.resamples, args.alpha, seed)
    log.info("incongruent pairing (sentence -> image of sentence): %s", res.permutation)
    (out / "permutation.txt").write_text("".join(f"{i}\t{j}\n" for i, j in enumerate(res.permutation)), encoding="utf-8")
    write_hypotheses(res.congruent_hyps, vocab, out / "congruent.hyp")
    write_hypotheses(res.incongruent_hyps, vocab, out / "incongruent.hyp")
    sig = res.significance
    write_report({
        "adversarial": {
            "congruent_bleu": res.congruent.score, "incongruent_bleu": res.incongruent.score,
            "k": str(policy), "permutation": res.permutation,
        },
        "significance": {
            "difference": sig.difference, "p_value": sig.p_value, "significant": sig.significant,
            "alpha": sig.alpha, "resamples": sig.resamples,
        },
    }, out / "report.ini")
    print(f"congruent {res.congruent.score:.2f}  incongruent {res.incongruent.score:.2f}  p = {sig.p_value:.4f}")
    return 0


def _parse_hyp_arg(text: str) -> tuple[str, str, str]:
    """``SYSTEM:K=PATH`` for wait-k outputs, ``SYSTEM=PATH`` for Full-trained ones."""
    head, sep, path = text.partition("=")
    if not sep or not path:
        raise ValueError(f"expected SYSTEM:K=PATH or SYSTEM=PATH, got {text!r}")
    system, _, k = head.partition(":")
    return system, k, path


def cmd_analyze_entities(args) -> int:
    out = Path(args.out)
    specs = [_parse_hyp_arg(h) for h in args.hyp or []]
    inputs = fingerprints([args.src, args.ref, args.annotations] + [p for _, _, p in specs])
    RunManifest("analyze-entities", {"k": args.k, "hyp": args.hyp or []}, None, None, inputs, list(args.argv)).write(out)
    pairs = load_parallel_corpus(args.src, args.ref, max_len=None)
    annotations = load_entity_annotations(args.annotations, pairs)
    wait_hyps: dict[str, dict[int, list]] = {}
    full_hyps: dict[str, list] = {}
    for system, k, path in specs:
        hyps = read_tokens(path)
        if len(hyps) != len(pairs):
            raise ContractError(f"line count mismatch: {path} has {len(hyps)}, test set has {len(pairs)}")
        if k in ("", "full"):
            full_hyps[system] = hyps
        else:
            wait_hyps.setdefault(system, {})[int(k)] = hyps
    report = entity_report(pairs, annotations, args.k, wait_hyps, full_hyps)
    table = report.to_table()
    (out / "entities.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def tiny_msnmt_problem(vocab: int = 11, emb: int = 4, hidden: int = 6, feature: int = 8, seed: int = 0):
    """A full multimodal forward + prefix loss at tiny dims in wide precision.

    Returns ``(loss_fn, tensors)`` suitable for ``tensor.grad_check``.
    """
    cfg = ModelConfig(
        vocab_size=vocab, emb_dim=emb, hidden_dim=hidden, feature_dim=feature,
        dropout_emb=0.0, dropout_enc=0.0, dropout_out=0.0, seed=seed, precision="wide",
    )
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    for t in params.tensors.values():
        # nonzero everywhere so every parameter carries gradient signal
        t.data = rng.normal(0.0, 0.5, t.shape)
    tokens = [str(i) for i in range(vocab - 4)]
    v = Vocab(tokens)
    pairs = [
        SentencePair([tokens[(i + j) % len(tokens)] for j in range(4 - i)], [tokens[(2 * i + j) % len(tokens)] for j in range(3)], str(i), str(i))
        for i in range(2)
    ]
    images = rng.normal(0.0, 1.0, (2, cfg.image_len, feature))
    batch = encode_batch(pairs, v, np.arange(2), "none", dtype=cfg.dtype)
    batch.images = images
    policy = Policy.wait(2)

    def loss_fn(*_):
        return prefix_loss(params, batch, policy)

    return loss_fn, list(params.tensors.values())


def cmd_grad_check(args) -> int:
    if args.precision != "wide":
        raise ContractError(
            f"gradient checking needs --precision wide: in {args.precision!r} precision rounding noise "
            f"in the finite differences exceeds the {GRAD_TOLERANCE:g} tolerance"
        )
    dims = [int(x) for x in args.dims.split(",")]
    if len(dims) != 4 or dims[0] < 5 or min(dims) < 1:
        raise ValueError(f"--dims expects VOCAB,EMB,HIDDEN,FEATURE with VOCAB >= 5, got {args.dims!r}")
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out) if args.out else None
    if out is not None:
        RunManifest("grad-check", {"dims": dims, "precision": args.precision, "epsilon": args.epsilon}, seed, None, {}, list(args.argv)).write(out)
    loss_fn, tensors = tiny_msnmt_problem(*dims, seed=seed)
    err = T.grad_check(loss_fn, tensors, epsilon=args.epsilon)
    verdict = "PASS" if err <= GRAD_TOLERANCE else "FAIL"
    line = f"max relative error {err:.3e} {verdict} (tolerance {GRAD_TOLERANCE:g})"
    if out is not None:
        (out / "grad_check.txt").write_text(line + "\n", encoding="utf-8")
    print(line)
    return 0 if verdict == "PASS" else 1


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msnmt", description="Multimodal simultaneous NMT experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth-data", help="write a synthetic SVO->SOV corpus with image features")
    p.add_argument("--config")
    p.add_argument("--size", type=int)
    p.add_argument("--test-size", type=int)
    common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a text-only or multimodal model")
    p.add_argument("--config")
    p.add_argument("--policy.k", dest="policy_k")
    p.add_argument("--features", help="feature file, or 'zeros' to train on zero features only")
    p.add_argument("--precision", choices=("standard", "wide"))
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="greedy simultaneous decoding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--images", help="image id per source line (default: line index)")
    p.add_argument("--features")
    p.add_argument("--policy.k", dest="policy_k")
    p.add_argument("--precision", choices=("standard", "wide"))
    common(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU, AL and paired bootstrap significance")
    p.add_argument("--hyp")
    p.add_argument("--ref")
    p.add_argument("--trace")
    p.add_argument("--compare")
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--system", choices=("snmt", "msnmt"), help="add a row to plot.csv")
    p.add_argument("--policy.k", dest="policy_k")
    p.add_argument("--average", nargs="+", metavar="REPORT", help="average report files instead")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("adversarial", help="congruent vs incongruent image evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--images")
    p.add_argument("--features")
    p.add_argument("--policy.k", dest="policy_k")
    p.add_argument("--precision", choices=("standard", "wide"))
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    common(p)
    p.set_defaults(func=cmd_adversarial)

    p = sub.add_parser("analyze-entities", help="entities translated before their source was read")
    p.add_argument("--src", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--k", type=int, nargs="+", default=[1, 3, 5, 7])
    p.add_argument("--hyp", action="append", help="SYSTEM:K=PATH (wait-k) or SYSTEM=PATH (Full-trained)")
    common(p)
    p.set_defaults(func=cmd_analyze_entities)

    p = sub.add_parser("grad-check", help="finite-difference check of the full multimodal step")
    p.add_argument("--dims", default="11,4,6,8", help="VOCAB,EMB,HIDDEN,FEATURE")
    p.add_argument("--precision", choices=("standard", "wide"), default="wide")
    p.add_argument("--epsilon", type=float, default=1e-5)
    common(p, out_required=False)
    p.set_defaults(func=cmd_grad_check)
    return parser


EXPECTED_ERRORS = (
    ConfigError, ContractError, CheckpointError, DataFormatError, ShapeError,
    TrainingDiverged, FileNotFoundError, PermissionError, IsADirectoryError, LookupError, ValueError, OSError,
)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
