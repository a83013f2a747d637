"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime/numeric error,
3 external-service error.  Logs go to stderr; artifacts go under --out.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bank as bank_io
from .errors import ValidationError, VapError

log = logging.getLogger("vapdiff")

SUBCOMMANDS = ("describe", "bank", "train", "sample", "eval", "downstream", "ablate", "toygen")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--out", required=True, help="directory receiving every artifact")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dry-run", action="store_true", help="validate inputs and exit without writing")
    if config:
        p.add_argument("--config", help="run config (flat TOML)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vapdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("toygen", help="write the procedural toy benchmark")
    _common(p, config=False)
    p.add_argument("--n", type=int, default=60, help="training images")
    p.add_argument("--n-test", type=int, default=0, help="additional test-split images")

    p = sub.add_parser("describe", help="run the three-turn description protocol over a dataset")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--modality")
    p.add_argument("--client", choices=("lookup", "http"), default="lookup",
                   help="lookup: answer from the dataset's ground-truth attributes; http: chat endpoint")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--split", default=None, help="only describe this split")

    p = sub.add_parser("bank", help="build a prompt bank from transcripts")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--transcripts", required=True, nargs="+")
    p.add_argument("--split", default="train", help="dataset split whose images enter the bank ('all' for every split)")
    p.add_argument("--holdout", type=float, default=None, help="also write a seen/unseen split")
    p.add_argument("--name", default="bank")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank")
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--prompt-source", choices=("bank", "free", "none"), default="bank")
    p.add_argument("--free-text", default="")

    p = sub.add_parser("eval", help="FID / IS / precision / recall of generated images")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--fake", required=True, help="directory of generated PNGs")
    p.add_argument("--split", default="test")
    p.add_argument("--extractor", default="toy-cnn", help="toy-cnn or a registered extractor id")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--plot", action="store_true")

    p = sub.add_parser("downstream", help="classification with and without synthetic augmentation")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank")
    p.add_argument("--real-fraction", type=float, default=0.1)
    p.add_argument("--count", type=int, default=200, help="synthetic images")

    p = sub.add_parser("ablate", help="train and score ablation arms")
    _common(p)
    p.add_argument("--arms", default="full,no_vaps,no_pcm")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed or config seed)")
    p.add_argument("--plot", action="store_true")
    return parser


def _overrides(args, keys: dict[str, str]) -> dict:
    return {cfg_key: getattr(args, attr) for attr, cfg_key in keys.items() if getattr(args, attr, None) is not None}


def _load_cfg(args, extra: dict | None = None):
    from .engine.config import load_config

    overrides = _overrides(args, {"seed": "seed", **(extra or {})})
    if args.config is None:
        raise ValidationError("--config is required", field="config")
    base = load_config(args.config)
    for key, value in overrides.items():
        if getattr(base, key) != value:
            log.info("flag overrides config: %s = %r (config had %r)", key, value, getattr(base, key))
    return load_config(args.config, overrides) if overrides else base


def _dataset_path(args) -> str:
    if getattr(args, "dataset", None):
        return args.dataset
    if args.config:
        from .engine.config import load_config

        return load_config(args.config).dataset
    raise ValidationError("--dataset (or --config with a dataset key) is required", field="dataset")


def cmd_toygen(args) -> None:
    from .data import generate_toy_dataset

    if args.n < 1 or args.n_test < 0:
        raise ValidationError("--n must be positive", field="n")
    if args.dry_run:
        return
    ds = generate_toy_dataset(args.out, n=args.n, seed=args.seed or 0, n_test=args.n_test)
    log.info("wrote %d images in %d classes to %s", len(ds.records), ds.num_classes, args.out)


def cmd_describe(args) -> None:
    from .data import ImageDataset
    from .vaps import HttpChatClient, LookupClient, batch_describe, get_provider, get_templates
    from .vaps.clients import image_digest

    cfg = None
    if args.config:
        from .engine.config import load_config

        cfg = load_config(args.config)
    dataset = ImageDataset(_dataset_path(args))
    modality = args.modality or (cfg.modality if cfg else "dermatologic")
    get_templates(modality)
    provider = get_provider(cfg.text_provider if cfg else "bow", cfg.text_dim if cfg else 64)
    records = dataset.records if args.split is None else dataset.split(args.split)
    if args.client == "http":
        if not args.endpoint or not args.model:
            raise ValidationError("--endpoint and --model are required for the http client", field="endpoint")
        client = HttpChatClient(args.endpoint, args.model)
    else:
        if not dataset.descriptions:
            raise ValidationError("lookup client needs attributes.jsonl in the dataset", field="client")
        client = LookupClient({image_digest(r.read_bytes()): dataset.descriptions[r.image_id] for r in records})
    if args.dry_run:
        return
    n = sum(1 for _ in batch_describe([(r.image_id, r.path) for r in records], modality, client, provider,
                                      args.out, workers=args.workers))
    log.info("described %d new images", n)


def cmd_bank(args) -> None:
    from .data import ImageDataset
    from .vaps import load_transcripts

    dataset = ImageDataset(_dataset_path(args))
    meta = {r.image_id: r for r in dataset.records}
    bank = bank_io.PromptBank(dataset.num_classes, args.name)
    for path in args.transcripts:
        for tr in load_transcripts(path):
            rec = meta.get(tr.image_id)
            if rec is None:
                raise ValidationError(f"transcript image {tr.image_id} is not in the dataset", field="transcripts")
            if args.split != "all" and rec.split != args.split:
                continue
            bank.insert(bank_io.DescriptionRecord(tr.tmix, rec.class_id, tr.image_id))
    if args.holdout is not None:
        seen, unseen = bank_io.split_bank(bank, args.holdout, args.seed or 0)
    if args.dry_run:
        return
    out = Path(args.out)
    bank_io.save(bank, out / f"{args.name}.jsonl")
    if args.holdout is not None:
        bank_io.save(seen, out / f"{args.name}_seen.jsonl")
        bank_io.save(unseen, out / f"{args.name}_unseen.jsonl")
    log.info("bank %s: %s", args.name, bank.counts())


def cmd_train(args) -> None:
    from .engine import Trainer

    cfg = _load_cfg(args, {"steps": "steps", "alpha": "alpha"})
    cfg.validate_paths()
    if args.dry_run:
        return
    out = Path(args.out)
    if args.resume:
        trainer = Trainer.resume(args.resume, cfg, out)
    else:
        trainer = Trainer(cfg, out)
    trainer.run()
    trainer.save(out / "checkpoint.pt")
    trainer.write_loss_csv(out / "loss.csv")
    log.info("trained %d steps; final loss %.4f", trainer.step, trainer.history[-1]["l_total"] if trainer.history else float("nan"))


def _bank_for(args, cfg_bank: str | None):
    path = args.bank or cfg_bank
    return bank_io.load(path) if path else None


def cmd_sample(args) -> None:
    from .engine import SampleRequest, Sampler, generate

    sampler = Sampler.from_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else sampler.cfg.seed
    request = SampleRequest(args.class_id, args.count, args.prompt_source, args.free_text, seed, args.out)
    bank = _bank_for(args, sampler.cfg.bank if args.prompt_source == "bank" else None)
    if args.dry_run:
        return
    generate(request, sampler, bank)


def _extractor(args, dataset_root: str):
    from .evalkit import fit_toy_extractor, get_extractor, register_extractor

    if args.extractor == "toy-cnn":
        ext = fit_toy_extractor(Path(args.out) / "extractor")
        register_extractor(ext)
        return ext
    return get_extractor(args.extractor)


def cmd_eval(args) -> None:
    import torch

    from .data import ImageDataset, read_png
    from .engine.config import load_config
    from .evalkit import FeatureSet, MetricReport, fid, inception_score, plot_bars, precision_recall, write_csv

    dataset = ImageDataset(_dataset_path(args))
    fake_paths = sorted(Path(args.fake).glob("*.png"))
    if len(fake_paths) <= args.k:
        raise ValidationError(f"need more than k={args.k} generated images in {args.fake}", field="fake")
    if args.dry_run:
        return
    ext = _extractor(args, dataset.root)
    real, _, _ = dataset.tensors(args.split)
    fake = torch.stack([read_png(p) for p in fake_paths])
    rf, ff = FeatureSet(ext.features(real), ext.extractor_id), FeatureSet(ext.features(fake), ext.extractor_id)
    precision, recall = precision_recall(rf, ff, args.k)
    is_mean, is_std = inception_score(ext.class_probs(fake)) if hasattr(ext, "class_probs") else (float("nan"),) * 2
    report = MetricReport(
        fid=fid(rf, ff), is_mean=is_mean, is_std=is_std, precision=precision, recall=recall,
        n_real=len(rf), n_fake=len(ff), extractor_id=ext.extractor_id,
        config_hash=load_config(args.config).hash() if args.config else "",
    )
    write_csv([report.to_row()], Path(args.out) / "metrics.csv", append=True)
    if args.plot:
        plot_bars([{"run": "eval", **report.to_row()}], "run", ["fid", "precision", "recall"], Path(args.out) / "metrics.png")
    print(json.dumps(report.to_row()))


def cmd_downstream(args) -> None:
    from .data import ImageDataset
    from .engine import Sampler, downstream_run
    from .evalkit import write_csv

    sampler = Sampler.from_checkpoint(args.checkpoint)
    dataset = ImageDataset(_dataset_path(args) if args.config else sampler.cfg.dataset)
    if not dataset.split("test"):
        raise ValidationError("downstream evaluation needs a test split", field="dataset")
    bank = _bank_for(args, sampler.cfg.bank if sampler.cfg.use_vaps else None)
    if args.dry_run:
        return
    seed = args.seed if args.seed is not None else sampler.cfg.seed
    base, aug = downstream_run(sampler, dataset, args.real_fraction, args.count, seed, bank)
    rows = [base.to_row(), aug.to_row()]
    write_csv(rows, Path(args.out) / "downstream.csv", append=True)
    for r in rows:
        print(json.dumps(r))


def cmd_ablate(args) -> None:
    from .engine import ablation_run, validate_arms
    from .evalkit import plot_bars, write_csv

    cfg = _load_cfg(args)
    arms = validate_arms(cfg, [a.strip() for a in args.arms.split(",") if a.strip()])
    cfg.validate_paths()
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    if args.dry_run:
        return
    ext = _extractor(argparse.Namespace(extractor="toy-cnn", out=args.out), cfg.dataset)
    rows = ablation_run(cfg, arms, ext, seeds, args.out)
    write_csv(rows, Path(args.out) / "ablation.csv")
    if args.plot:
        plot_bars(rows, "arm", ["fid", "recall"], Path(args.out) / "ablation.png")
    for r in rows:
        print(json.dumps(r))


COMMANDS = {
    "toygen": cmd_toygen,
    "describe": cmd_describe,
    "bank": cmd_bank,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "downstream": cmd_downstream,
    "ablate": cmd_ablate,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"vapdiff: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if args.seed is not None:
        import torch

        torch.manual_seed(args.seed)
    try:
        COMMANDS[args.command](args)
    except VapError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (FileNotFoundError, PermissionError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure: %s", exc)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
