"""Operator entry points.

    ringmpc gen-triples --kind arith --width 64 --count 100000 --seed 1 --out t.bin
    ringmpc gen-model --arch cnn --seed 11 --out workdir/
    ringmpc search --mode budget --budget 8/64 --model workdir --data workdir \
        --seed 3 --out config.json
    ringmpc run-local --model workdir --config config.json --data workdir \
        --batch 64 --seed 5 --report reduced.json
    ringmpc run-party --party 0 --listen 127.0.0.1:9500 ...
    ringmpc report --compare full.json reduced.json

Every source of randomness hangs off an explicit --seed, so reports and
logits reproduce bit for bit across runs, processes, and transports.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dealer, models, nn, ring, search, sharing, simulator, transport
from .errors import ConfigError, RingMpcError
from .nn import ModelSpec, ReluConfig
from .protocol import ProtocolSession
from .transport import TAGS

_INPUT_STREAM = 0x1289


def _seed_rng(seed: int, *scope: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *scope]))


def _triple_seed(seed: int, kind: str, width: int) -> int:
    kind_code = 1 if kind == dealer.ARITH else 2
    return int(np.random.SeedSequence([seed, 0x7337, kind_code, width]).generate_state(1)[0])


def _build_stores(model: ModelSpec, relu_cfg: ReluConfig, batch: int, seed: int):
    """Both parties' triple stores, derived deterministically from the seed.

    Emulates a trusted dealer: the batches are a pure function of the run
    seed, so separate party processes deal themselves identical shares.
    """
    need = nn.triple_requirements(model, relu_cfg, batch)
    stores = (dealer.TripleStore(0), dealer.TripleStore(1))
    for (kind, width), count in sorted(need.items()):
        gen = dealer.gen_arith_triples if kind == dealer.ARITH else dealer.gen_bool_triples
        batch_ = gen(count, width, _triple_seed(seed, kind, width))
        for store in stores:
            store.add_batch(batch_)
    return stores


def _load_relu_config(path: str, model: ModelSpec) -> ReluConfig:
    if path == "full":
        return ReluConfig.full(model)
    try:
        obj = json.loads(Path(path).read_text())
        cfg = ReluConfig.from_json(obj)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot read relu config {path}: {exc}") from exc
    if len(cfg.windows) != model.n_groups:
        raise ConfigError(
            f"config {path} has {len(cfg.windows)} groups, model needs {model.n_groups}"
        )
    return cfg


def _load_batch(data_dir: str, model: ModelSpec, batch: int, split: str = "val"):
    images = nn.load_idx(Path(data_dir) / f"{split}-images.idx")
    labels = nn.load_idx(Path(data_dir) / f"{split}-labels.idx")
    if batch > images.shape[0]:
        raise ConfigError(f"batch {batch} exceeds the {images.shape[0]} available samples")
    return models.model_input(model, images[:batch]), labels[:batch]


def _config_digest(model_path: str, relu_cfg: ReluConfig, batch: int, seed: int) -> str:
    blob = json.dumps(
        {"model": str(model_path), "config": relu_cfg.to_json(), "batch": batch, "seed": seed},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _logits_digest(logits: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(logits).tobytes()).hexdigest()[:16]


def _report_dict(meter_json, layers, wall_ms, digest, extra=None) -> dict:
    out = {"tags": meter_json["tags"], "layers": layers, "wall_ms": wall_ms, "config_digest": digest}
    if extra:
        out.update(extra)
    return out


def _emit_report(report: dict, path: str | None) -> None:
    text = json.dumps(report, indent=2)
    print(text)
    if path:
        Path(path).write_text(text)


def cmd_gen_triples(args) -> int:
    if args.kind == "arith":
        batch = dealer.gen_arith_triples(args.count, args.width, args.seed)
    else:
        batch = dealer.gen_bool_triples(args.count, args.width, args.seed)
    dealer.save_triples(batch, args.out)
    print(f"wrote {args.count} {args.kind} triples (width {args.width}) to {args.out}")
    return 0


def cmd_gen_model(args) -> int:
    model, train_set, val_set = models.reference_model(args.arch, args.seed)
    out = Path(args.out)
    nn.save_model(model, out)
    nn.save_idx(out / "train-images.idx", train_set[0])
    nn.save_idx(out / "train-labels.idx", train_set[1])
    nn.save_idx(out / "val-images.idx", val_set[0])
    nn.save_idx(out / "val-labels.idx", val_set[1])
    x_val = models.model_input(model, val_set[0])
    logits = simulator.plain_forward(model, x_val)
    acc = float(np.mean(np.argmax(logits, axis=1) == val_set[1]))
    print(f"wrote {args.arch} model to {out} (plain val accuracy {acc:.4f})")
    return 0


def cmd_search(args) -> int:
    model = nn.load_model(args.model)
    images = nn.load_idx(Path(args.data) / "val-images.idx")
    labels = nn.load_idx(Path(args.data) / "val-labels.idx")
    n = min(args.val_samples, images.shape[0])
    x_val = models.model_input(model, images[:n])
    y_val = labels[:n]
    if args.mode == "eco":
        result = search.search_eco(model, x_val, y_val, seed=args.seed)
    else:
        if args.budget is None:
            raise ConfigError("--budget is required for budget mode")
        result = search.search_budget(
            model, x_val, y_val, args.budget, threshold=args.threshold, seed=args.seed
        )
    result.save(args.out)
    print(
        f"{args.mode} search: accuracy {result.accuracy:.4f} "
        f"(baseline {result.baseline_accuracy:.4f}), bits fraction {result.bits_fraction:.4f}"
    )
    print(f"wrote {args.out}")
    return 0


def run_local_forward(model: ModelSpec, relu_cfg: ReluConfig, x_f: np.ndarray, seed: int):
    """Both parties in process: returns (logits, meters, layer logs, wall_ms)."""
    cfg = model.fixed_point
    batch = x_f.shape[0]
    encoded = ring.encode_array(x_f, cfg)
    s0, s1 = sharing.share_arith(encoded, cfg.ring_bits, _seed_rng(seed, _INPUT_STREAM))
    stores = _build_stores(model, relu_cfg, batch, seed)
    ep0, ep1 = transport.local_pair()
    sessions = (
        ProtocolSession(ep0, stores[0], cfg),
        ProtocolSession(ep1, stores[1], cfg),
    )
    layer_logs: tuple[list, list] = ([], [])
    start = time.perf_counter()
    out0, out1 = transport.run_parties(
        lambda: nn.model_forward(sessions[0], s0, model, relu_cfg, layer_logs[0]),
        lambda: nn.model_forward(sessions[1], s1, model, relu_cfg, layer_logs[1]),
        endpoints=(ep0, ep1),
    )
    wall_ms = (time.perf_counter() - start) * 1000.0
    logits = ring.decode_array(sharing.reconstruct_arith(out0, out1), cfg)
    return logits, (ep0.meter, ep1.meter), layer_logs, wall_ms


def cmd_run_local(args) -> int:
    model = nn.load_model(args.model)
    relu_cfg = _load_relu_config(args.config, model)
    x_f, labels = _load_batch(args.data, model, args.batch)

    logits, meters, layer_logs, wall_ms = run_local_forward(model, relu_cfg, x_f, args.seed)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    digest = _config_digest(args.model, relu_cfg, args.batch, args.seed)
    report = _report_dict(
        meters[0].to_json(),
        layer_logs[0],
        wall_ms,
        digest,
        extra={
            "accuracy": accuracy,
            "logits_sha256": _logits_digest(logits),
            "peer_tags": meters[1].to_json()["tags"],
        },
    )
    _emit_report(report, args.report)
    return 0


def cmd_run_party(args) -> int:
    model = nn.load_model(args.model)
    relu_cfg = _load_relu_config(args.config, model)
    x_f, labels = _load_batch(args.data, model, args.batch)
    cfg = model.fixed_point

    encoded = ring.encode_array(x_f, cfg)
    shares = sharing.share_arith(encoded, cfg.ring_bits, _seed_rng(args.seed, _INPUT_STREAM))
    mine = shares[args.party]
    stores = _build_stores(model, relu_cfg, args.batch, args.seed)

    if args.party == 0:
        host, port = _parse_hostport(args.listen, "--listen")
        ep = transport.tcp_listen(host, port)
    else:
        host, port = _parse_hostport(args.connect, "--connect")
        ep = transport.tcp_connect(host, port)
    session = ProtocolSession(ep, stores[args.party], cfg)
    layers: list = []
    start = time.perf_counter()
    try:
        out = nn.model_forward(session, mine, model, relu_cfg, layers)
    finally:
        ep.close()
    wall_ms = (time.perf_counter() - start) * 1000.0

    digest = _config_digest(args.model, relu_cfg, args.batch, args.seed)
    report = _report_dict(
        ep.meter.to_json(),
        layers,
        wall_ms,
        digest,
        extra={
            "party": args.party,
            "logits_share": [[int(v) for v in row] for row in out.data],
        },
    )
    _emit_report(report, args.report)
    return 0


def cmd_report(args) -> int:
    try:
        full = json.loads(Path(args.compare[0]).read_text())
        reduced = json.loads(Path(args.compare[1]).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read reports: {exc}") from exc

    def ratio(a: int, b: int) -> float:
        if b == 0:
            return 1.0 if a == 0 else float("inf")
        return a / b

    rows = {}
    for tag in TAGS:
        fa = full["tags"].get(tag, {"bytes": 0, "rounds": 0})
        ra = reduced["tags"].get(tag, {"bytes": 0, "rounds": 0})
        rows[tag] = {
            "bytes_ratio": ratio(fa["bytes"], ra["bytes"]),
            "rounds_ratio": ratio(fa["rounds"], ra["rounds"]),
        }
    total_full = sum(full["tags"][t]["bytes"] for t in full["tags"])
    total_reduced = sum(reduced["tags"][t]["bytes"] for t in reduced["tags"])
    rounds_full = sum(full["tags"][t]["rounds"] for t in full["tags"])
    rounds_reduced = sum(reduced["tags"][t]["rounds"] for t in reduced["tags"])
    rows["Total"] = {
        "bytes_ratio": ratio(total_full, total_reduced),
        "rounds_ratio": ratio(rounds_full, rounds_reduced),
    }
    print(f"{'tag':<10} {'bytes x':>10} {'rounds x':>10}")
    for tag, row in rows.items():
        print(f"{tag:<10} {row['bytes_ratio']:>10.2f} {row['rounds_ratio']:>10.2f}")
    print(json.dumps(rows))
    return 0


def _parse_hostport(text: str | None, flag: str) -> tuple[str, int]:
    if not text or ":" not in text:
        raise ConfigError(f"{flag} requires HOST:PORT")
    host, _, port = text.rpartition(":")
    try:
        return host, int(port)
    except ValueError as exc:
        raise ConfigError(f"{flag}: bad port in {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ringmpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-triples", help="deal correlated randomness to a file")
    p.add_argument("--kind", choices=["arith", "bool"], required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_triples)

    p = sub.add_parser("gen-model", help="emit a fitted reference model plus datasets")
    p.add_argument("--arch", choices=["mlp", "cnn"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("search", help="choose per-group ReLU bit windows offline")
    p.add_argument("--mode", choices=["eco", "budget"], required=True)
    p.add_argument("--budget", default=None, help="bit fraction, e.g. 8/64")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val-samples", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("run-local", help="run both parties in process and report")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True, help="config JSON path, or 'full'")
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_run_local)

    p = sub.add_parser("run-party", help="run one party over TCP")
    p.add_argument("--party", type=int, choices=[0, 1], required=True)
    p.add_argument("--listen", default=None)
    p.add_argument("--connect", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_run_party)

    p = sub.add_parser("report", help="compare two run reports tag by tag")
    p.add_argument("--compare", nargs=2, required=True, metavar=("FULL", "REDUCED"))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RingMpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
