"""``siamcaps`` command line.

Exit codes: 0 success, 1 check/evaluation failure, 2 usage or data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .capsbackend import BackendConfig, init_params, parameter_count, score
from .embedio import SynthSpec, generate_synthetic, import_csv, read_store, write_store
from .errors import SiamcapsError
from .evaluator import (
    CapsuleScorer,
    CosineScorer,
    compute_eer,
    make_trials,
    read_scores,
    read_trials,
    score_trials,
    split_heldout,
    write_scores,
    write_trials,
)
from .trainer import TrainConfig, load_checkpoint, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CliError(SiamcapsError):
    pass


# --- key=value run configuration ------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _converter(tp):
    tp = tp if isinstance(tp, type) else {"int": int, "float": float, "bool": bool, "str": str}[tp]
    return _parse_bool if tp is bool else tp


def read_config_file(path) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise CliError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


class RunConfig:
    """Resolves a set of typed keys from defaults < config file < command line."""

    def __init__(self, schema: dict[str, tuple[type, object]]):
        self.schema = schema

    def add_flags(self, parser: argparse.ArgumentParser) -> None:
        for key, (tp, _default) in self.schema.items():
            conv = _converter(tp)
            metavar = "BOOL" if conv is _parse_bool else conv.__name__.upper()
            parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None, type=str, metavar=metavar)

    def resolve(self, args: argparse.Namespace, config_path=None) -> dict:
        values = {k: default for k, (_tp, default) in self.schema.items()}
        if config_path is not None:
            for key, text in read_config_file(config_path).items():
                if key not in self.schema:
                    raise CliError(f"unknown config key {key!r} in {config_path}")
                values[key] = self._convert(key, text)
        for key in self.schema:
            text = getattr(args, key, None)
            if text is not None:
                values[key] = self._convert(key, text)
        return values

    def _convert(self, key, text):
        try:
            return _converter(self.schema[key][0])(text)
        except ValueError as exc:
            raise CliError(f"bad value for {key}: {exc}") from None


def _dataclass_schema(cls) -> dict[str, tuple[type, object]]:
    return {f.name: (f.type, f.default) for f in dataclasses.fields(cls)}


BACKEND_SCHEMA = _dataclass_schema(BackendConfig)
TRAIN_SCHEMA = _dataclass_schema(TrainConfig)
SYNTH_SCHEMA = {
    "speakers": (int, None),
    "utts": (int, None),
    "dim": (int, None),
    "sigma_b": (float, 1.0),
    "sigma_w": (float, 0.5),
    "seed": (int, 0),
}


def echo_config(values: dict) -> str:
    line = "resolved config: " + " ".join(f"{k}={_fmt(v)}" for k, v in values.items())
    print(line)
    return line


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# --- commands ---------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    values = RunConfig(SYNTH_SCHEMA).resolve(args, args.config)
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise CliError(f"missing required settings: {', '.join(missing)}")
    echo_config(values)
    spec = SynthSpec(values["speakers"], values["utts"], values["dim"], values["sigma_b"], values["sigma_w"],
                     values["seed"])
    store = generate_synthetic(spec)
    write_store(store, args.out)
    print(f"wrote {len(store)} records of dimension {store.dim} to {args.out}")
    return EXIT_OK


def cmd_import_csv(args) -> int:
    store = import_csv(args.csv, args.dim)
    write_store(store, args.out)
    print(f"wrote {len(store)} records of dimension {store.dim} to {args.out}")
    return EXIT_OK


def cmd_gen_trials(args) -> int:
    store = read_store(args.store)
    train_store, held = split_heldout(store, args.heldout)
    trials = make_trials(held, args.trials, seed=args.seed)
    write_trials(trials, args.out_trials)
    write_store(train_store, args.out_train)
    write_store(held, args.out_heldout)
    print(f"wrote {len(trials)} trials over {len(held)} held-out utterances; "
          f"training store has {len(train_store)} records")
    return EXIT_OK


def cmd_train(args) -> int:
    schema = {**BACKEND_SCHEMA, **TRAIN_SCHEMA}
    values = RunConfig(schema).resolve(args, args.config)
    backend_cfg = BackendConfig(**{k: values[k] for k in BACKEND_SCHEMA})
    train_cfg = TrainConfig(**{k: values[k] for k in TRAIN_SCHEMA})
    echo_config(values)
    print(f"parameters: {parameter_count(backend_cfg)}")

    store = read_store(args.store)
    if store.dim != backend_cfg.input_dim:
        raise CliError(f"store dimension {store.dim} does not match input_dim {backend_cfg.input_dim}")
    resume = load_checkpoint(args.resume) if args.resume else None

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = Path(args.trace) if args.trace else out_dir / "trace.csv"
    with open(trace_path, "w", encoding="utf-8") as trace:
        trace.write("step,lr,loss\n")

        def log(step, lr, loss):
            trace.write(f"{step},{lr!r},{loss!r}\n")

        result = train(store, backend_cfg, train_cfg, resume=resume, checkpoint_dir=out_dir, on_step=log)

    final = out_dir / f"checkpoint_{result.step:07d}.sckpt"
    if result.trace:
        print(f"final loss: {result.trace[-1][2]:.6f}")
    print(f"checkpoint: {final}")
    return EXIT_OK


def cmd_score(args) -> int:
    store = read_store(args.store)
    trials = read_trials(args.trials)
    if args.scorer == "capsule":
        if not args.checkpoint:
            raise CliError("--checkpoint is required with --scorer capsule")
        ckpt = load_checkpoint(args.checkpoint)
        scorer = CapsuleScorer(ckpt.params, ckpt.config)
    else:
        scorer = CosineScorer()
    records = score_trials(trials, store, scorer)
    write_scores(records, args.out)
    print(f"scored {len(records)} trials with {scorer.name} scorer into {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    trials = read_trials(args.trials)
    rows = read_scores(args.scores)
    if len(rows) != len(trials):
        raise CliError(f"score file has {len(rows)} lines but trial list has {len(trials)}")
    # match by pair identity so score-file order does not matter
    by_pair: dict[tuple[str, str], list[float]] = {}
    for e, t, value in rows:
        by_pair.setdefault((e, t), []).append(value)
    values = []
    for t in trials:
        queue = by_pair.get((t.enroll_utt, t.test_utt))
        if not queue:
            raise CliError(f"no score for trial ({t.enroll_utt}, {t.test_utt})")
        values.append(queue.pop(0))
    eer, threshold = compute_eer((np.array(values), np.array([t.label for t in trials])))
    print(f"EER: {100 * eer:.2f}% @ threshold {threshold:.6f}")
    return EXIT_OK


def gradcheck_errors(config: BackendConfig, seed: int = 0, step: float = 1e-4) -> dict[str, float]:
    """Per-parameter finite-difference errors of ``bce(score)`` at 64-bit precision."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=rng, dtype=np.float64, head_scale=0.5)
    if params.initial_logits is not None:
        params.initial_logits.data = rng.normal(0, 0.5, size=params.initial_logits.shape)
    if params.primary_bias is not None:
        params.primary_bias.data = rng.normal(0, 0.5, size=params.primary_bias.shape)
    enroll = dc.Tensor(rng.normal(size=(2, config.input_dim)))
    test = dc.Tensor(rng.normal(size=(2, config.input_dim)))
    labels = np.array([1.0, 0.0])
    named = params.named()

    def loss(*tensors):
        p = type(params)(**dict(zip(named, tensors)))
        return dc.mean(dc.bce_loss(score(enroll, test, p, config), labels))

    errors = dc.gradient_errors(loss, list(named.values()), step=step)
    return dict(zip(named, errors))


def cmd_gradcheck(args) -> int:
    config = BackendConfig(input_dim=args.dim, num_capsules=args.capsules, capsule_dim=args.capsule_dim,
                           routing_iters=args.routing_iters, use_primary_capsules=args.primary_capsules,
                           trainable_logits=args.trainable_logits)
    errors = gradcheck_errors(config, seed=args.seed, step=args.step)
    worst = max(errors, key=errors.get)
    for name, err in errors.items():
        print(f"{name}: {err:.3e}")
    print(f"max relative gradient error: {errors[worst]:.3e}")
    if not errors[worst] < args.threshold:
        print(f"FAIL: {worst} exceeds threshold {args.threshold:g}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamcaps", description="Siamese capsule back-end for speaker verification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic Gaussian-speaker embedding store")
    p.add_argument("--config")
    p.add_argument("--speakers", dest="speakers")
    p.add_argument("--utts", dest="utts")
    p.add_argument("--dim", dest="dim")
    p.add_argument("--sigma-b", dest="sigma_b")
    p.add_argument("--sigma-w", dest="sigma_w")
    p.add_argument("--seed", dest="seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("import-csv", help="convert 'utt,speaker,f1..fD' CSV into a store")
    p.add_argument("--csv", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_csv)

    p = sub.add_parser("gen-trials", help="split held-out utterances and write a balanced trial list")
    p.add_argument("--store", required=True)
    p.add_argument("--heldout", type=int, default=4, help="held-out utterances per speaker")
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-trials", required=True)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-heldout", required=True)
    p.set_defaults(func=cmd_gen_trials)

    p = sub.add_parser("train", help="train the capsule back-end")
    p.add_argument("--store", required=True)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume")
    p.add_argument("--trace", help="loss trace CSV (default: OUT_DIR/trace.csv)")
    RunConfig({**BACKEND_SCHEMA, **TRAIN_SCHEMA}).add_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a trial list")
    p.add_argument("--store", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--scorer", choices=("capsule", "cosine"), required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="report the equal error rate of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare back-end gradients with central differences")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--capsules", type=int, default=2)
    p.add_argument("--capsule-dim", type=int, default=4)
    p.add_argument("--routing-iters", type=int, default=3)
    p.add_argument("--primary-capsules", action="store_true")
    p.add_argument("--trainable-logits", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SiamcapsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
