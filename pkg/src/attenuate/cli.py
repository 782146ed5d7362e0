"""Command-line entry point.

Subcommands: process, train, bench, synth-corpus, embed, serve, profile.
Exit codes: 0 success, 1 usage error, 2 runtime error. A key=value config
file supplies defaults; explicit flags win over the file, the file wins over
built-ins.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import report
from .audio import read_wav, write_wav
from .datagen import TOY_CLASSES, ClassCatalog, make_eval_shards, synth_corpus
from .embeddings import BUILTIN_CLASS_IDS, EmbeddingStore
from .errors import EngineError
from .metrics import profile_stream, run_benchmark
from .streaming import StreamConfig, StreamSession, process_file
from .suppressor import init_model, load_model, save_model, toy_config
from .training import TrainConfig, train


def _load_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise EngineError(f"config line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """flags > config file > defaults; flags parse with None sentinels."""
    overlay = _load_config_file(args.config) if getattr(args, "config", None) else {}
    for key, default in defaults.items():
        if getattr(args, key, None) is None:
            if key in overlay:
                raw = overlay[key]
                caster = type(default) if default is not None else str
                setattr(args, key, caster(raw) if caster is not bool
                        else raw.lower() in ("1", "true", "yes"))
            else:
                setattr(args, key, default)
    if getattr(args, "verbose", False):
        for key in sorted(defaults):
            print(f"# {key}={getattr(args, key)}")
    return args


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file overlay")
    p.add_argument("--verbose", action="store_true", help="print the resolved config")
    p.add_argument("--format", choices=("text", "records"), default="text",
                   help="human table or machine-readable line records")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attenuate",
                                     description="Target-conditioned sound attenuation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="write a synthetic class-organized corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", type=int, default=None, dest="per_class")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-shards", default=None, dest="eval_shards",
                   help="also write evaluation shards to this directory")
    p.add_argument("--eval-per-condition", type=int, default=None, dest="eval_per_condition")
    _add_common(p)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("train", help="train the suppressor on a class catalog")
    p.add_argument("--catalog", help="corpus directory or manifest file")
    p.add_argument("--toy", action="store_true",
                   help="synthesize the built-in 6-class toy corpus first")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--crop-seconds", type=float, default=None, dest="crop_seconds")
    p.add_argument("--val-per-condition", type=int, default=None, dest="val_per_condition")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="benchmark a model on evaluation shards")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--shards", required=True)
    p.add_argument("--conditions", default=None, help="comma list, e.g. 1,2,3")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mask-hook", choices=("ones", "zeros"), default=None, dest="mask_hook",
                   help="test hook forcing a constant mask")
    p.add_argument("--out", default=None, help="directory for report, records, figure")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("process", help="suppress targets in a WAV file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--targets", default=None, help="comma-separated class ids")
    p.add_argument("--strength", type=float, default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--encoding", choices=("pcm16", "float32"), default=None)
    _add_common(p)
    p.set_defaults(func=cmd_process)

    p = sub.add_parser("embed", help="build a class embedding from recordings")
    p.add_argument("recordings", nargs="+")
    p.add_argument("--class-id", required=True, dest="class_id")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True, help="store file (created if missing)")
    p.add_argument("--provenance", choices=("builtin", "custom"), default=None)
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("serve", help="run the control service")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--port", type=int, default=None, help="TCP control port")
    p.add_argument("--ws-port", type=int, default=None, dest="ws_port")
    p.add_argument("--http-port", type=int, default=None, dest="http_port",
                   help="static UI server port (serves --ui-dir)")
    p.add_argument("--ui-dir", default=None, dest="ui_dir")
    p.add_argument("--source", default=None, help="WAV file looped as live input")
    p.add_argument("--device-rate", type=int, default=None, dest="device_rate")
    p.add_argument("--data-dir", default=None, dest="data_dir")
    p.add_argument("--fast", action="store_true", help="no real-time pacing")
    _add_common(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("profile", help="profile streaming performance")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--duration", type=float, default=None, help="seconds of stream time")
    p.add_argument("--targets", default=None)
    p.add_argument("--device-rate", type=int, default=None, dest="device_rate")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_profile)

    return parser


# ---------------------------------------------------------------------------


def cmd_synth_corpus(args) -> int:
    args = _resolve(args, {"classes": 6, "per_class": 8, "seed": 0,
                           "eval_per_condition": 16})
    ids = (TOY_CLASSES + tuple(c for c in BUILTIN_CLASS_IDS if c not in TOY_CLASSES))
    ids = ids[: args.classes]
    catalog = synth_corpus(args.out, class_ids=ids, per_class=args.per_class,
                           seed=args.seed)
    print(f"wrote {sum(catalog.counts.values())} files for {len(ids)} classes to {args.out}")
    if args.eval_shards:
        make_eval_shards(catalog, args.eval_shards, args.eval_per_condition,
                         seed=args.seed)
        print(f"wrote evaluation shards to {args.eval_shards}")
    return 0


def cmd_train(args) -> int:
    args = _resolve(args, {"steps": 2000, "batch_size": 4, "lr": 1e-3,
                           "crop_seconds": 1.0, "val_per_condition": 16, "seed": 7})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.toy:
        # the canonical 6-class corpus is fixed; --seed steers training only
        catalog = synth_corpus(out / "toy_corpus", per_class=8, seed=0)
    elif args.catalog:
        cat_path = Path(args.catalog)
        catalog = (ClassCatalog.from_manifest(cat_path) if cat_path.is_file()
                   else ClassCatalog.from_dir(cat_path))
    else:
        print("error: provide --catalog or --toy", file=sys.stderr)
        return 1
    model = init_model(toy_config(), seed=args.seed)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, base_lr=args.lr,
                      crop_seconds=args.crop_seconds,
                      val_examples_per_condition=args.val_per_condition,
                      seed=args.seed, out_dir=str(out))
    result = train(model, catalog, cfg)
    save_model(model, out / "model.attn", {"steps": str(args.steps), "seed": str(args.seed)})
    result.store.save(out / "store.embd")
    result.log.write(out / "train_log.txt")
    report.training_figure(result.log, out / "train_loss.png")
    if result.log.aborted:
        print("training aborted on non-finite loss; last good parameters kept",
              file=sys.stderr)
        return 2
    if result.log.validation:
        for c, v in sorted(result.log.validation.items()):
            print(f"val condition={c} si_snri={v:.3f}")
    print(f"model: {out / 'model.attn'}")
    return 0


def cmd_bench(args) -> int:
    args = _resolve(args, {"conditions": "1,2,3", "seed": 0})
    conditions = tuple(int(c) for c in str(args.conditions).split(","))
    model = load_model(args.model)
    store = EmbeddingStore.load(args.store)
    rep = run_benchmark(model, store, args.shards, conditions=conditions,
                        mask_hook=args.mask_hook, seed=args.seed,
                        model_id=Path(args.model).name)
    if args.format == "records":
        sys.stdout.write(rep.to_records())
    else:
        print(rep.format_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench_report.txt").write_text(rep.format_table() + "\n", encoding="utf-8")
        (out / "bench_records.txt").write_text(rep.to_records(), encoding="utf-8")
        report.bench_figure(rep, out / "bench_sisnr.png")
    return 0


def cmd_process(args) -> int:
    args = _resolve(args, {"targets": "", "strength": 1.0, "encoding": "float32"})
    model = load_model(args.model)
    store = EmbeddingStore.load(args.store)
    wave = read_wav(args.input)
    targets = tuple(t for t in str(args.targets).split(",") if t)
    out = process_file(model, store, wave, targets, float(args.strength))
    write_wav(args.output, out, args.encoding)
    print(f"wrote {args.output} ({out.duration:.2f} s at {out.sample_rate} Hz)")
    return 0


def cmd_embed(args) -> int:
    from .embeddings import build_class_embedding

    args = _resolve(args, {"provenance": "custom"})
    model = load_model(args.model)
    store_path = Path(args.store)
    store = EmbeddingStore.load(store_path) if store_path.exists() else EmbeddingStore()
    recordings = [read_wav(p) for p in args.recordings]
    emb = build_class_embedding(recordings, model)
    store.upsert(args.class_id, emb, args.provenance, recording_count=len(recordings))
    store.save(store_path)
    print(f"stored embedding for {args.class_id!r} ({len(recordings)} recordings)")
    return 0


def cmd_serve(args) -> int:
    from .service import AudioPump, ControlService, ServiceConfig, SocketServer, WebSocketServer

    import os

    # the data directory is the one setting with an environment override
    args = _resolve(args, {"port": 8765, "ws_port": 8766, "http_port": 0,
                           "device_rate": 48000,
                           "data_dir": os.environ.get("ATTENUATE_DATA_DIR",
                                                      "attenuate_data"),
                           "ui_dir": "frontend/dist"})
    model = load_model(args.model)
    store = EmbeddingStore.load(args.store)
    svc = ControlService(model, store, ServiceConfig(device_rate=args.device_rate,
                                                     data_dir=args.data_dir))
    svc.handle_command({"v": 1, "id": "boot", "cmd": "start_session", "args": {}})
    sock = SocketServer(svc, port=args.port)
    ws = WebSocketServer(svc, port=args.ws_port)
    sock.start()
    ws.start()
    pump = AudioPump(svc, source_path=args.source, realtime=not args.fast)
    pump.start()
    httpd = None
    if args.http_port and Path(args.ui_dir).is_dir():
        import functools
        import http.server

        handler = functools.partial(http.server.SimpleHTTPRequestHandler,
                                    directory=args.ui_dir)
        httpd = http.server.ThreadingHTTPServer(("127.0.0.1", args.http_port), handler)
        import threading
        threading.Thread(target=httpd.serve_forever, daemon=True).start()
        print(f"ui:      http://127.0.0.1:{args.http_port}/")
    print(f"socket:  127.0.0.1:{sock.port}")
    print(f"ws:      ws://127.0.0.1:{ws.port}")
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        pump.stop()
        sock.stop()
        ws.stop()
        if httpd:
            httpd.shutdown()
    return 0


def cmd_profile(args) -> int:
    args = _resolve(args, {"duration": 10.0, "targets": "", "device_rate": 48000,
                           "seed": 0})
    model = load_model(args.model)
    store = EmbeddingStore.load(args.store)
    targets = tuple(t for t in str(args.targets).split(",") if t)
    cfg = StreamConfig(device_rate=args.device_rate)
    sink: list[np.ndarray] = []
    session = StreamSession(model, store, cfg, sink=sink.append)
    if targets:
        session.set_targets(targets)
    rng = np.random.default_rng(args.seed)
    hop = cfg.hop_device
    n_hops = int(args.duration * 1000 / cfg.hop_ms)
    for _ in range(n_hops):
        session.push_input(rng.standard_normal(hop).astype(np.float32) * 0.1)
    rec = profile_stream(session)
    sys.stdout.write(rec.to_records())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "profile_records.txt").write_text(rec.to_records(), encoding="utf-8")
        report.profile_figure(session.hop_times_ms, cfg.hop_ms, out / "profile_hops.png")
    return 0


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, KeyboardInterrupt) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
