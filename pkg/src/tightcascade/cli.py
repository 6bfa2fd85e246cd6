"""Command-line driver for the synthetic speech-translation experiments.

Every command works inside one run directory::

    run/
      manifest.json          one entry per command: config hash, seed, input/output checksums
      task.json              synthetic task (signatures, permutation, noise)
      data/{train,dev,test}.txt/.bin
      asr.ckpt  mt.ckpt  cascade.ckpt  tight.ckpt  direct.ckpt
      *.ppl.jsonl            dev perplexity per checkpoint
      decode/<name>.transcript  decode/<name>.translation
      gamma_sweep.txt/.jsonl  compare.txt/.jsonl

Files are written to temporary siblings and renamed into place, so a failed
command leaves no partial artifacts.  Exit status is 0 on success and 1 when
an error is reported.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .bridge import BridgeConfig
from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .data import SyntheticTaskSpec, gen_corpus, load_task, read_corpus, save_task, write_corpus
from .metrics import bleu, ter_simplified, wer
from .models import FreezeMask, build_cascade, build_direct, build_tight, new_asr, new_mt
from .nn import DecoderConfig, EncoderConfig
from .pipeline import GAMMA_GRID, decode_corpus, format_table, gamma_sweep, random_baseline_bleu, score_system, to_jsonl
from .train import TrainConfig, finetune_tight, load_config, pretrain, train_direct

SPLITS = ("train", "dev", "test")
SPLIT_STREAMS = {"train": 0, "dev": 1, "test": 2}


# ---------------------------------------------------------------------------
# run directory helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _record(run: Path, command: str, config: dict, inputs: list[Path], outputs: list[Path]) -> None:
    """Add or replace this command's manifest entry."""
    manifest_path = run / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    blob = json.dumps(config, sort_keys=True).encode()
    manifest[command] = {
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "config": config,
        "seed": config.get("seed"),
        "inputs": {str(p.relative_to(run)) if p.is_relative_to(run) else str(p): _sha256(p) for p in inputs},
        "outputs": {str(p.relative_to(run)): _sha256(p) for p in outputs},
    }
    atomic_write_bytes(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return path


def _task(run: Path) -> SyntheticTaskSpec:
    return load_task(_require(run / "task.json"))


def _corpus(run: Path, split: str):
    spec = _task(run)
    return read_corpus(_require(run / "data" / f"{split}.txt"), spec.source_vocab(), spec.target_vocab())


def _train_config(args) -> TrainConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return load_config(args.config, overrides)


def _write_lines(path: Path, seqs, vocab) -> None:
    atomic_write_bytes(path, "".join(" ".join(vocab.decode(s)) + "\n" for s in seqs).encode())


def _ppl_logger(run: Path, name: str):
    records = []

    def on_checkpoint(rec):
        records.append(rec)
        atomic_write_bytes(run / f"{name}.ppl.jsonl", to_jsonl(records).encode())

    return on_checkpoint


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    run = Path(args.run)
    spec = SyntheticTaskSpec(
        vocab_size=args.vocab_size,
        feature_dim=args.feature_dim,
        frames_per_token=(args.min_frames, args.max_frames),
        noise_sigma=args.noise_sigma,
        min_len=args.min_len,
        max_len=args.max_len,
        target_rule=args.target_rule,
        seed=args.seed,
    )
    sizes = {"train": args.train, "dev": args.dev, "test": args.test}
    outputs = [run / "task.json"]
    save_task(run / "task.json", spec)
    for split, n in sizes.items():
        corpus = gen_corpus(spec, n, prefix=f"{split}-", stream=SPLIT_STREAMS[split])
        write_corpus(run / "data" / f"{split}.txt", corpus, spec.source_vocab(), spec.target_vocab())
        outputs += [run / "data" / f"{split}.txt", run / "data" / f"{split}.bin"]
    config = json.loads(spec.to_json()) | {"sizes": sizes}
    config.pop("signatures")
    _record(run, "gen-data", config, [], outputs)
    print(f"wrote {sum(sizes.values())} utterances to {run / 'data'}")
    return 0


def _arch(args, pool: list[int]):
    enc = EncoderConfig(num_layers=args.layers, hidden=args.hidden, pool_factors=pool, embed_dim=args.embed_dim)
    dec = DecoderConfig(hidden=args.hidden, embed_dim=args.embed_dim, attention_dim=args.hidden)
    return enc, dec


def _pretrain(args, kind: str) -> int:
    run = Path(args.run)
    cfg = _train_config(args)
    spec = _task(run)
    train, dev = _corpus(run, "train"), _corpus(run, "dev")
    if kind == "asr":
        enc, dec = _arch(args, [int(p) for p in args.pool.split(",")] if args.pool else [])
        model = new_asr(spec.source_vocab(), spec.feature_dim, enc, dec, seed=cfg.seed, initial_layers=args.initial_layers)
    else:
        enc, dec = _arch(args, [])
        model = new_mt(spec.source_vocab(), spec.target_vocab(), enc, dec, seed=cfg.seed, initial_layers=args.initial_layers)
    out = run / f"{kind}.ckpt"
    pretrain(model, train, dev, cfg, checkpoint_path=out, on_checkpoint=_ppl_logger(run, kind))
    config = json.loads(json.dumps(vars(args), default=str)) | {"train": cfg.to_text(), "seed": cfg.seed}
    for key in ("func", "run", "verbose"):
        config.pop(key, None)
    _record(run, f"train-{kind}", config, [run / "data" / "train.txt", run / "data" / "dev.txt"], [out, run / f"{kind}.ppl.jsonl"])
    print(f"wrote {out}")
    return 0


def cmd_train_asr(args) -> int:
    return _pretrain(args, "asr")


def cmd_train_mt(args) -> int:
    return _pretrain(args, "mt")


def cmd_build_cascade(args) -> int:
    run = Path(args.run)
    asr = load_checkpoint(_require(run / "asr.ckpt"))
    mt = load_checkpoint(_require(run / "mt.ckpt"))
    out = run / "cascade.ckpt"
    save_checkpoint(build_cascade(asr, mt), out)
    _record(run, "build-cascade", {"seed": None}, [run / "asr.ckpt", run / "mt.ckpt"], [out])
    print(f"wrote {out}")
    return 0


def cmd_decode(args) -> int:
    run = Path(args.run)
    model_path = _require(Path(args.model) if args.model else run / "cascade.ckpt")
    model = load_checkpoint(model_path)
    corpus = _corpus(run, args.split)
    out = decode_corpus(model, corpus, args.mode, args.beam, args.max_len, args.gamma)
    name = args.name or f"{model_path.stem}.{args.mode}.{args.split}"
    outputs = []
    if out.transcripts is not None:
        p = run / "decode" / f"{name}.transcript"
        _write_lines(p, out.transcripts, model.source_vocab)
        outputs.append(p)
    if out.translations is not None:
        p = run / "decode" / f"{name}.translation"
        _write_lines(p, out.translations, model.target_vocab)
        outputs.append(p)
    config = {"mode": args.mode, "beam": args.beam, "max_len": args.max_len, "gamma": args.gamma, "split": args.split, "seed": None}
    _record(run, f"decode:{name}", config, [model_path, run / "data" / f"{args.split}.txt"], outputs)
    for p in outputs:
        print(f"wrote {p}")
    return 0


def cmd_finetune_tight(args) -> int:
    run = Path(args.run)
    cfg = _train_config(args)
    source = _require(Path(args.model) if args.model else run / "cascade.ckpt")
    base = load_checkpoint(source)
    bridge = BridgeConfig(gamma=args.train_gamma, train_gamma=args.train_gamma, decode_gamma=args.decode_gamma)
    tight = build_tight(base, bridge)
    mask = FreezeMask.parse(args.freeze)
    out = run / (args.name or "tight")
    out = out.with_suffix(".ckpt")
    finetune_tight(tight, _corpus(run, "train"), _corpus(run, "dev"), mask, cfg, checkpoint_path=out, on_checkpoint=_ppl_logger(run, out.stem))
    config = {"train": cfg.to_text(), "seed": cfg.seed, "freeze": mask.frozen_prefixes, "bridge": bridge.to_dict()}
    _record(run, f"finetune-tight:{out.stem}", config, [source, run / "data" / "train.txt"], [out, run / f"{out.stem}.ppl.jsonl"])
    print(f"wrote {out}")
    return 0


def cmd_gamma_sweep(args) -> int:
    run = Path(args.run)
    model_path = _require(Path(args.model) if args.model else run / "cascade.ckpt")
    model = load_checkpoint(model_path)
    corpus = _corpus(run, args.split)
    grid = [float(g) for g in args.grid.split(",")] if args.grid else list(GAMMA_GRID)
    res = gamma_sweep(model, corpus, grid, args.beam, args.max_len)
    rows = [r.to_dict() for r in res.rows]
    rows.append({"gamma": "cascade", "bleu": res.cascade_bleu})
    rows.append({"gamma": "random", "bleu": random_baseline_bleu([c.translation for c in corpus], len(model.target_vocab))})
    table = format_table(rows, ["gamma", "bleu", "ter"])
    atomic_write_bytes(run / "gamma_sweep.txt", table.encode())
    atomic_write_bytes(run / "gamma_sweep.jsonl", to_jsonl(rows).encode())
    _record(run, "gamma-sweep", {"grid": grid, "beam": args.beam, "split": args.split, "seed": None}, [model_path], [run / "gamma_sweep.txt", run / "gamma_sweep.jsonl"])
    print(f"asr wer {res.wer:.2f}")
    print(table, end="")
    return 0


def _read_tokens(path: Path) -> list[list[str]]:
    return [line.split() for line in _require(path).read_text(encoding="utf-8").splitlines()]


def cmd_evaluate(args) -> int:
    refs, hyps = _read_tokens(Path(args.ref)), _read_tokens(Path(args.hyp))
    metrics = {"wer": wer, "bleu": bleu, "ter": ter_simplified}
    names = list(metrics) if args.metric == "all" else [args.metric]
    for n in names:
        print(metrics[n](refs, hyps).to_line())
    return 0


def cmd_compare(args) -> int:
    run = Path(args.run)
    cfg = _train_config(args)
    corpus = _corpus(run, args.split)
    cascade = load_checkpoint(_require(run / "cascade.ckpt"))
    tight = load_checkpoint(_require(Path(args.tight) if args.tight else run / "tight.ckpt"))
    direct_path = run / "direct.ckpt"
    if direct_path.exists():
        direct = load_checkpoint(direct_path)
    else:
        asr = load_checkpoint(_require(run / "asr.ckpt"))
        mt = load_checkpoint(_require(run / "mt.ckpt"))
        direct = build_direct(asr, mt, seed=cfg.seed)
        train_direct(direct, _corpus(run, "train"), _corpus(run, "dev"), cfg, checkpoint_path=direct_path, on_checkpoint=_ppl_logger(run, "direct"))
    rows = [
        score_system("cascade", corpus, decode_corpus(cascade, corpus, "cascade", args.beam, args.max_len)),
        score_system("direct", corpus, decode_corpus(direct, corpus, "direct", args.beam, args.max_len)),
        score_system("tight", corpus, decode_corpus(tight, corpus, "soft", args.beam, args.max_len)),
    ]
    table = format_table(rows, ["system", "wer", "bleu", "ter"])
    atomic_write_bytes(run / "compare.txt", table.encode())
    atomic_write_bytes(run / "compare.jsonl", to_jsonl(rows).encode())
    inputs = [run / "cascade.ckpt", direct_path, Path(args.tight) if args.tight else run / "tight.ckpt"]
    _record(run, "compare", {"split": args.split, "beam": args.beam, "seed": cfg.seed, "train": cfg.to_text()}, inputs, [run / "compare.txt", run / "compare.jsonl"])
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' training config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value (repeatable)")


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--max-len", type=int, default=75)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tightcascade", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every checkpoint")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic train/dev/test corpora")
    p.add_argument("--run", required=True)
    p.add_argument("--train", type=int, default=4000)
    p.add_argument("--dev", type=int, default=400)
    p.add_argument("--test", type=int, default=400)
    p.add_argument("--vocab-size", type=int, default=30)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--min-frames", type=int, default=2)
    p.add_argument("--max-frames", type=int, default=5)
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--target-rule", choices=("cipher", "cipher_reverse"), default="cipher_reverse")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    for kind, func in (("asr", cmd_train_asr), ("mt", cmd_train_mt)):
        p = sub.add_parser(f"train-{kind}", help=f"pretrain the {kind.upper()} model")
        p.add_argument("--run", required=True)
        _add_train_flags(p)
        p.add_argument("--layers", type=int, default=2, help="target encoder depth")
        p.add_argument("--initial-layers", type=int, default=None, help="start depth for layer-wise growth")
        p.add_argument("--hidden", type=int, default=64)
        p.add_argument("--embed-dim", type=int, default=32)
        if kind == "asr":
            p.add_argument("--pool", default="2", help="comma-separated time pooling factors")
        p.set_defaults(func=func)

    p = sub.add_parser("build-cascade", help="merge asr.ckpt and mt.ckpt into cascade.ckpt")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_build_cascade)

    p = sub.add_parser("decode", help="write transcripts and/or translations")
    p.add_argument("--run", required=True)
    p.add_argument("--model", help="checkpoint (default: run/cascade.ckpt)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--mode", choices=("auto", "asr", "mt", "direct", "cascade", "one_hot", "soft"), default="auto")
    p.add_argument("--gamma", type=float, default=None, help="decode exponent for --mode soft")
    p.add_argument("--name", help="output basename under run/decode")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("finetune-tight", help="fine-tune the tight model end to end")
    p.add_argument("--run", required=True)
    p.add_argument("--model", help="cascade checkpoint (default: run/cascade.ckpt)")
    p.add_argument("--freeze", default="", help="comma-separated parameter prefixes, e.g. asr.encoder,asr.decoder")
    p.add_argument("--train-gamma", type=float, default=1.0)
    p.add_argument("--decode-gamma", type=float, default=2.0)
    p.add_argument("--name", help="output checkpoint basename (default: tight)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune_tight)

    p = sub.add_parser("gamma-sweep", help="BLEU/TER of the cascade across posterior exponents")
    p.add_argument("--run", required=True)
    p.add_argument("--model", help="cascade or tight checkpoint (default: run/cascade.ckpt)")
    p.add_argument("--split", choices=SPLITS, default="dev")
    p.add_argument("--grid", help="comma-separated exponents (default: 0.5,0.9,1,1.5,2,4,32,128,1024)")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_gamma_sweep)

    p = sub.add_parser("evaluate", help="score a hypothesis file against a reference file")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--metric", choices=("wer", "bleu", "ter", "all"), default="all")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="cascade vs direct vs tight on one split")
    p.add_argument("--run", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--tight", help="tight checkpoint (default: run/tight.ckpt)")
    _add_train_flags(p)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
