"""Command-line entry point: ``vipg <command> [flags]``.

Exit codes: 0 success, 1 usage or validation error, 2 data error,
3 numeric failure (non-finite values, diverged training).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ck
from . import dataio as dio
from . import evalmetrics as em
from . import numerics as nx
from . import textprep as tp
from . import training as T
from .inference import DEFAULT_ALPHA, DEFAULT_BEAM, InferenceError, Paraphraser
from .model import ModelConfig, ModelError, ParaphraseModel, build_partial_mask

log = logging.getLogger("vipg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SAMPLE_DUMP = 10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads() -> int:
    raw = os.environ.get("VIPG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"VIPG_THREADS must be an integer, got {raw!r}")


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")


# ---------------------------------------------------------------------------
# synth-data
# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    spec = dio.SynthSpec.from_json(args.spec) if args.spec else dio.SynthSpec()
    if args.sigma is not None:
        spec.sigma = args.sigma
    out = dio.synth_generate(args.n, args.seed, spec, args.out)
    _write_json(Path(args.out) / "config.json",
                {"command": "synth-data", "n": args.n, "seed": args.seed, "spec": json.loads(spec.to_json())})
    print(f"wrote {args.n} records to {out.manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def _tagger_for(args, n: int):
    if args.tags:
        rows = tp.read_tags_sidecar(args.tags)
        if len(rows) != n:
            raise tp.TaggingFormatError(f"tag sidecar has {len(rows)} lines for {n} records")
        return [tp.PretaggedTagger(r) for r in rows]
    tagger = tp.LexiconTagger(tp.load_lexicon(args.lexicon)) if args.lexicon else tp.default_tagger()
    return [tagger] * n


def cmd_preprocess(args) -> int:
    manifest = Path(args.manifest)
    records = dio.load_manifest(manifest)
    if args.tags and args.captions != "all":
        raise UsageError("--tags needs --captions all (one tag line per manifest record)")
    taggers = _tagger_for(args, len(records))
    records_sel = dio.select_captions(records, args.captions, args.seed)
    index = {r.id: i for i, r in enumerate(records)}
    processed = []
    for rec in records_sel:
        try:
            processed.append(tp.process(rec.caption, taggers[index[rec.id]], args.capacity))
        except tp.TextPrepError as e:
            raise tp.TextPrepError(f"record {rec.id!r}: {e}") from e
    vocab = tp.build_vocab(processed, args.min_freq, args.capacity)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.json")
    with (out / "processed.jsonl").open("w", encoding="utf-8") as fh:
        for rec, p in zip(records_sel, processed):
            obj, rel, tgt = tp.to_model_input(p, vocab)
            fh.write(json.dumps({
                "id": rec.id, "caption": rec.caption, "feature": rec.feature_path,
                "objects": p.objects, "relation": p.relation, "target": p.target,
                "object_ids": obj, "relation_ids": rel, "target_ids": tgt,
            }) + "\n")
    dump = "\n\n".join(tp.format_table(p) for p in processed[:SAMPLE_DUMP])
    (out / "samples.txt").write_text(dump + ("\n" if dump else ""), encoding="utf-8")
    _write_json(out / "config.json", {
        "command": "preprocess", "manifest": str(manifest.resolve()),
        "feature_root": str(manifest.resolve().parent), "captions": args.captions, "seed": args.seed,
        "capacity": args.capacity, "min_freq": args.min_freq, "tags": args.tags, "lexicon": args.lexicon,
        "vocab_sha256": vocab.sha256(),
    })
    print(f"processed {len(processed)} records, vocabulary of {len(vocab)} tokens -> {out}")
    return EXIT_OK


def load_processed(data_dir: Path) -> tuple[list[dict], tp.Vocab, dict]:
    data_dir = Path(data_dir)
    for name in ("processed.jsonl", "vocab.json", "config.json"):
        if not (data_dir / name).exists():
            raise dio.DataError(f"{data_dir / name} not found; run preprocess first")
    rows = [json.loads(line) for line in (data_dir / "processed.jsonl").read_text(encoding="utf-8").splitlines()
            if line.strip()]
    return rows, tp.Vocab.load(data_dir / "vocab.json"), json.loads((data_dir / "config.json").read_text())


def _row_to_processed(row: dict, original_text: bool) -> tp.ProcessedText:
    p = tp.ProcessedText([tuple(o) for o in row["objects"]], row["relation"], row["target"], row["caption"])
    return tp.as_original_text(p) if original_text else p


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

DEFAULT_RUN = {
    "data": None,
    "out": "runs/default",
    "seed": 0,
    "val_fraction": 0.1,
    "model": {},
    "train": {},
}


def resolve_run_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_RUN))
    if args.config:
        user = _read_json(args.config)
        unknown = set(user) - set(DEFAULT_RUN)
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        for key, val in user.items():
            if isinstance(val, dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    for flag, key in (("data", "data"), ("out", "out"), ("seed", "seed"), ("val_fraction", "val_fraction")):
        if getattr(args, flag, None) is not None:
            cfg[key] = getattr(args, flag)
    if args.ablation is not None:
        cfg["train"]["ablation"] = args.ablation
    if args.lambda_kl is not None:
        cfg["train"]["lambda_kl"] = args.lambda_kl
    if args.max_steps is not None:
        cfg["train"]["max_steps"] = args.max_steps
    cfg["train"]["seed"] = cfg["seed"]
    if cfg["data"] is None:
        raise UsageError("no data directory: pass --data or set 'data' in the config")
    return cfg


def _split(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded hold-out split; with fraction 0 the training set doubles as validation."""
    if not 0 <= fraction < 1:
        raise UsageError("val_fraction must be in [0, 1)")
    n_val = int(round(n * fraction))
    if n_val == 0:
        return list(range(n)), list(range(n))
    perm = np.random.default_rng([seed, 7919]).permutation(n)
    val = sorted(perm[:n_val].tolist())
    train = sorted(perm[n_val:].tolist())
    return train, val


def cmd_train(args) -> int:
    run = resolve_run_config(args)
    rows, vocab, prep = load_processed(Path(run["data"]))
    try:
        tcfg = T.TrainConfig.from_dict(run["train"])
        model_fields = {f.name for f in fields(ModelConfig)}
        unknown = set(run["model"]) - model_fields
        if unknown:
            raise ModelError(f"unknown model config fields: {sorted(unknown)}")
        mcfg = ModelConfig(**{**run["model"], "vocab_size": len(vocab)})
        mcfg = T.apply_ablation(mcfg, tcfg.ablation)
        errors = mcfg.problems() + tcfg.problems()
        if errors:
            raise UsageError("invalid configuration: " + "; ".join(errors))
    except (TypeError, T.TrainingError, ModelError) as e:
        raise UsageError(str(e))
    run["model"] = {k: v for k, v in mcfg.to_dict().items() if k != "vocab_size"}
    run["train"] = tcfg.to_dict()

    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", run)
    vocab.save(out / "vocab.json")

    original = tcfg.ablation == "original_text"
    examples = []
    for row in rows:
        p = _row_to_processed(row, original)
        examples.append(dio.encode_example(row["id"], p, vocab, row["feature"]))
    if not examples:
        raise dio.DataError("no training records")
    dio.check_lengths(examples, mcfg.max_len)
    dio.attach_features(examples, prep["feature_root"], _threads())
    train_idx, val_idx = _split(len(examples), run["val_fraction"], run["seed"])
    train = [examples[i] for i in train_idx]
    val = [examples[i] for i in val_idx]
    val_sources = [rows[i]["caption"] for i in val_idx]

    model = ParaphraseModel(mcfg, seed=run["seed"])
    meta = {"vocab_sha256": vocab.sha256(), "ablation": tcfg.ablation}
    res = T.fit(model, train, val, tcfg, out, meta=meta, resume=args.resume, vocab=vocab,
                val_sources=val_sources)
    last = res.last_metrics or {}
    print(json.dumps({"best_step": res.best_step, "best_score": res.best_score,
                      **{k: last[k] for k in ("step", "ce", "kl", "total") if k in last}}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def _read_lines(path: str | None) -> list[str]:
    if path is None or path == "-":
        return sys.stdin.read().splitlines()
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    vocab_path = Path(args.vocab) if args.vocab else ckpt.parent / "vocab.json"
    if not vocab_path.exists():
        raise dio.DataError(f"vocabulary {vocab_path} not found")
    vocab = tp.Vocab.load(vocab_path)
    model, header = ck.load_model(ckpt, vocab.sha256())
    para = Paraphraser(model, vocab, original_text=header.get("ablation") == "original_text")
    lines = _read_lines(args.input)
    outputs = []
    if args.route == "paraphrase":
        for line in lines:
            outputs.append(para.paraphrase(line, args.beam, args.max_len, args.alpha))
    else:
        if not args.feature:
            raise UsageError("--route caption needs --feature")
        feat = dio.load_feature(args.feature)
        for line in lines:
            outputs.append(para.caption(feat, tp.process(line), args.beam, args.max_len, args.alpha))
    text = "".join(o + "\n" for o in outputs)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        _write_json(Path(args.out).with_name(Path(args.out).name + ".config.json"), {
            "command": "infer", "checkpoint": str(ckpt.resolve()), "vocab": str(vocab_path.resolve()),
            "input": args.input, "route": args.route, "beam": args.beam, "alpha": args.alpha,
            "max_len": args.max_len, "feature": args.feature,
        })
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _parse_external(items: list[str]) -> dict[str, float]:
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise UsageError(f"--external expects name=path, got {item!r}")
        try:
            raw = Path(path).read_text(encoding="utf-8").strip()
        except OSError as e:
            raise dio.DataError(f"external score file {path}: {e}") from e
        try:
            out[name] = float(raw.split()[-1])
        except (ValueError, IndexError):
            raise dio.DataError(f"external score file {path} does not end with a number")
    return out


def cmd_eval(args) -> int:
    sources = _read_lines(args.sources)
    candidates = _read_lines(args.candidates)
    if len(sources) != len(candidates):
        raise dio.DataError(f"{len(sources)} source lines but {len(candidates)} candidate lines")
    rep = em.report([tp.tokenize(s) for s in sources], [tp.tokenize(c) for c in candidates],
                    _parse_external(args.external))
    text = json.dumps(rep, indent=2, sort_keys=True)
    if args.out:
        _write_json(Path(args.out), rep)
        _write_json(Path(args.out).with_name(Path(args.out).name + ".config.json"), {
            "command": "eval", "sources": args.sources, "candidates": args.candidates,
            "external": args.external or [],
        })
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect-mask
# ---------------------------------------------------------------------------


def render_mask(l_i: int, l_o: int, l_r: int) -> str:
    mask = build_partial_mask(l_i, l_o, l_r)
    segs = "I" * l_i + "O" * l_o + "R" * l_r
    lines = ["    " + " ".join(segs)]
    for seg, row in zip(segs, mask):
        lines.append(f"{seg} | " + " ".join(str(int(v)) for v in row))
    lines.append(f"ones: {int(mask.sum())}")
    return "\n".join(lines)


def cmd_inspect_mask(args) -> int:
    if min(args.l_i, args.l_o, args.l_r) < 0:
        raise UsageError("segment lengths must be >= 0")
    try:
        print(render_mask(args.l_i, args.l_o, args.l_r))
    except ModelError as e:
        raise UsageError(str(e))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vipg", description="Visual-pivot paraphrase generation toolkit")
    parser.add_argument("--version", action="version", version=f"vipg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic caption/feature corpus")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file overriding the synthetic grammar")
    p.add_argument("--sigma", type=float, help="feature noise level")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("preprocess", help="tag, split and encode a caption manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--captions", choices=("one", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--capacity", type=int, default=tp.DEFAULT_CAPACITY)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--tags", help="sidecar file with one line of tags per manifest record")
    p.add_argument("--lexicon", help="word<TAB>tag lexicon replacing the bundled one")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on preprocessed data")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=T.ABLATIONS)
    p.add_argument("--lambda-kl", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--resume", action="store_true", help="continue from latest.state in the output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="paraphrase sentences, one per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="defaults to vocab.json next to the checkpoint")
    p.add_argument("--input", help="input file; standard input when omitted or '-'")
    p.add_argument("--out", help="write outputs here instead of standard output")
    p.add_argument("--beam", type=int, default=DEFAULT_BEAM)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="length normalisation exponent")
    p.add_argument("--max-len", type=int)
    p.add_argument("--route", choices=("paraphrase", "caption"), default="paraphrase")
    p.add_argument("--feature", help="image feature file for --route caption")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Self-BLEU and distinct-n of candidates against sources")
    p.add_argument("--sources", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--external", action="append", metavar="NAME=PATH",
                   help="merge a score produced by an outside tool")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-mask", help="print the partial attention mask")
    p.add_argument("l_i", type=int)
    p.add_argument("l_o", type=int)
    p.add_argument("l_r", type=int)
    p.set_defaults(func=cmd_inspect_mask)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"vipg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (T.TrainingDivergedError, nx.NumericsError) as e:
        print(f"vipg: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dio.DataError, tp.TextPrepError, ck.CheckpointError, InferenceError, IndexError, OSError) as e:
        print(f"vipg: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
