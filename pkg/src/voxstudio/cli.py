"""Command-line entry points.

Batch commands (dataset, train, selftest) run locally. Session commands
(sample, edit, preview, reconstruct) are a thin HTTP client: they target
--server when given, otherwise they boot the service in-process on a
loopback port and talk to it over the same API. Exit codes: 0 success,
1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import base64
import difflib
import json
import logging
import socket
import sys
import threading
import time
from pathlib import Path

from .config import PRESETS, resolve_config
from .errors import VoxError

log = logging.getLogger("voxstudio")


class _JsonLineFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps(
            {
                "ts": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
                "level": record.levelname,
                "module": record.name,
                "msg": record.getMessage(),
            }
        )


def _setup_logging(verbose: bool = False):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


class _Parser(argparse.ArgumentParser):
    """argparse with a did-you-mean hint on unknown flags."""

    def _all_option_strings(self):
        options = [o for a in self._actions for o in a.option_strings]
        for action in self._actions:
            if isinstance(action, argparse._SubParsersAction):
                for sub in action.choices.values():
                    options.extend(o for a in sub._actions for o in a.option_strings)
        return options

    def error(self, message):
        if "unrecognized arguments" in message:
            bad = message.split(":", 1)[1].strip().split()
            options = self._all_option_strings()
            for b in bad:
                close = difflib.get_close_matches(b, options, n=1)
                if close:
                    message += f" (did you mean {close[0]}?)"
        super().error(message)


def _banner(config_dict: dict, out_dir: Path | None = None, defer_write: bool = False):
    text = json.dumps(config_dict, indent=2, sort_keys=True)
    print("resolved config:", file=sys.stderr)
    print(text, file=sys.stderr)

    def write():
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "resolved_config.json").write_text(text)

    if defer_write:
        return write
    write()
    return None


def _load_overrides(args) -> dict:
    overrides = {}
    if getattr(args, "config", None):
        import yaml

        overrides.update(yaml.safe_load(Path(args.config).read_text()) or {})
    for key in ("n_views", "image_size", "train_steps", "lr", "batch_size", "sample_steps"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return overrides


# ---------------------------------------------------------------------------
# Embedded server / client plumbing


class _LocalServer:
    """Run the service on a loopback port for the duration of a command."""

    def __init__(self, data_dir: str, checkpoint: str | None, workers: int = 2):
        from .service import ServiceConfig, create_app

        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            self.port = s.getsockname()[1]
        self.app = create_app(config=ServiceConfig(data_dir=data_dir, checkpoint=checkpoint, workers=workers))
        import uvicorn

        self._server = uvicorn.Server(
            uvicorn.Config(self.app, host="127.0.0.1", port=self.port, log_level="warning")
        )
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def __enter__(self):
        self._thread.start()
        deadline = time.time() + 15
        while not self._server.started:
            if time.time() > deadline:
                raise RuntimeError("embedded service failed to start")
            time.sleep(0.02)
        return self

    def __exit__(self, *exc):
        self._server.should_exit = True
        self._thread.join(timeout=10)


def _client_for(args):
    import httpx

    if args.server:
        return httpx.Client(base_url=args.server, timeout=600.0), None
    server = _LocalServer(args.data_dir, args.checkpoint)
    server.__enter__()
    return httpx.Client(base_url=server.url, timeout=600.0), server


def _raise_for_error(resp):
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except json.JSONDecodeError:
            detail = resp.text
        raise VoxError(f"{resp.status_code}: {detail}")


def _wait_done(client, sid, targets=("previewable", "done"), poll=0.2):
    while True:
        info = client.get(f"/sessions/{sid}").json()
        if info["state"] in targets:
            return info
        if info["state"] == "failed":
            raise VoxError(f"job failed: {info.get('error')}")
        time.sleep(poll)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_dataset(args):
    from .cameras import Intrinsics, make_view_ring
    from .datagen import build_dataset

    cfg = resolve_config(args.preset, _load_overrides(args))
    out = Path(args.out)
    write_banner = _banner(
        {"command": "dataset", **cfg.to_dict(), "objects": args.objects, "out": str(out)},
        out,
        defer_write=True,  # the builder refuses a non-empty directory
    )
    views = make_view_ring(
        cfg.n_views, cfg.ring_elevation, cfg.ring_radius, Intrinsics.square(cfg.image_size)
    )
    manifest = build_dataset(
        args.objects, views, out, size=cfg.image_size, force=args.force, start_seed=args.seed
    )
    write_banner()
    log.info("dataset ready: %d objects under %s", manifest["n_objects"], out)
    return 0


def cmd_train(args):
    import torch

    from .model import StudioModel
    from .training import train_model

    cfg = resolve_config(args.preset, _load_overrides(args))
    out = Path(args.out)
    banner = {"command": "train", **cfg.to_dict(), "dataset": args.dataset, "out": str(out), "seed": args.seed}
    _banner(banner, out.parent if out.parent != Path(".") else None)
    if args.dry_run:
        return 0
    torch.manual_seed(args.seed)
    if args.resume and out.exists():
        model = StudioModel.load(out)
        log.info("resumed from %s", out)
    else:
        model = StudioModel(cfg)
    report = train_model(
        model,
        args.dataset,
        steps=args.steps if args.steps is not None else cfg.train_steps,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        seed=args.seed,
        checkpoint_path=out,
    )
    log.info(
        "training done: %d steps, loss %.4f -> %.4f, %.1fs",
        report.steps,
        report.window_mean(first=True),
        report.window_mean(first=False),
        report.wall_seconds,
    )
    return 0


def cmd_sample(args):
    client, server = _client_for(args)
    try:
        proxy_doc = json.loads(Path(args.proxy).read_text())
        strength = {"lambda": args.lam, "s_end": args.s_end, "n_samples": args.n_samples}
        r = client.post(
            "/sessions",
            json={"proxy": proxy_doc, "prompt_tag": args.prompt, "strength": strength, "seed": args.seed},
        )
        _raise_for_error(r)
        sid = r.json()["id"]
        body = {"n_candidates": args.n_candidates}
        if args.candidate:
            body["candidate_image_b64"] = base64.b64encode(Path(args.candidate).read_bytes()).decode()
        if args.steps:
            body["steps"] = args.steps
        r = client.post(f"/sessions/{sid}/generate", json=body)
        _raise_for_error(r)
        info = _wait_done(client, sid)
        out = Path(args.out or f"./session_{sid}")
        out.mkdir(parents=True, exist_ok=True)
        for name in info["artifacts"]:
            if name.startswith("views/") or name == "candidate.png":
                data = client.get(f"/sessions/{sid}/artifacts/{name}").content
                target = out / Path(name).name
                target.write_bytes(data)
        _banner({"command": "sample", "session": sid, "strength": strength, "seed": args.seed}, out)
        print(sid)
        log.info("session %s sampled; views under %s", sid, out)
        return 0
    finally:
        client.close()
        if server:
            server.__exit__()


def _parse_view(text):
    parts = dict(kv.split("=") for kv in text.split(","))
    return {"azimuth": float(parts["az"]), "elevation": float(parts.get("el", -30.0))}


def cmd_edit(args):
    client, server = _client_for(args)
    try:
        body = {
            "parts": [int(p) for p in args.parts.split(",")],
            "radius": args.radius,
        }
        if args.view:
            body["view"] = _parse_view(args.view)
        if args.seed is not None:
            body["seed"] = args.seed
        if args.prompt:
            body["prompt_tag"] = args.prompt
        r = client.post(f"/sessions/{args.session}/edit", json=body)
        _raise_for_error(r)
        _wait_done(client, args.session)
        log.info("edit applied to %s", args.session)
        return 0
    finally:
        client.close()
        if server:
            server.__exit__()


def cmd_preview(args):
    client, server = _client_for(args)
    try:
        params = {"az": args.az, "el": args.el}
        if args.steps:
            params["steps"] = args.steps
        r = client.get(f"/sessions/{args.session}/preview", params=params)
        _raise_for_error(r)
        out = Path(args.out or f"preview_{args.session}_az{args.az:g}.png")
        out.write_bytes(r.content)
        print(out)
        return 0
    finally:
        client.close()
        if server:
            server.__exit__()


def cmd_reconstruct(args):
    client, server = _client_for(args)
    try:
        body = {"use_volume_guidance": not args.no_volume_guidance}
        if args.iterations:
            body["iterations"] = args.iterations
        r = client.post(f"/sessions/{args.session}/reconstruct", json=body)
        _raise_for_error(r)
        info = _wait_done(client, args.session, targets=("done",))
        out = Path(args.out or f"./session_{args.session}")
        out.mkdir(parents=True, exist_ok=True)
        for name in info["artifacts"]:
            if name.startswith("mesh_") or name.startswith("metrics_") or name.startswith("recon_report"):
                (out / Path(name).name).write_bytes(
                    client.get(f"/sessions/{args.session}/artifacts/{name}").content
                )
        log.info("reconstruction artifacts under %s", out)
        return 0
    finally:
        client.close()
        if server:
            server.__exit__()


def cmd_serve(args):
    import uvicorn

    from .service import ServiceConfig, create_app

    cfg = ServiceConfig.load(args.config) if args.config else ServiceConfig.load()
    if args.data_dir:
        cfg.data_dir = args.data_dir
    if args.checkpoint:
        cfg.checkpoint = args.checkpoint
    if args.port:
        cfg.port = args.port
    if args.frontend:
        cfg.frontend_dir = args.frontend
    _banner({"command": "serve", **cfg.__dict__})
    app = create_app(config=cfg)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="info")
    return 0


def cmd_selftest(args):
    from . import selftest

    return selftest.run()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxstudio", description=__doc__)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_preset(p):
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--config", help="YAML file with config overrides")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("dataset", help="build the synthetic dataset")
    common_preset(p)
    p.add_argument("--out", required=True)
    p.add_argument("--objects", type=int, default=200)
    p.add_argument("--force", action="store_true")
    p.add_argument("--n-views", type=int, dest="n_views")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the generation model")
    common_preset(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_train)

    def client_opts(p):
        p.add_argument("--server", help="remote service URL (default: embedded)")
        p.add_argument("--data-dir", default="./studio_data")
        p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("sample", help="generate multiview images for a proxy")
    client_opts(p)
    p.add_argument("--proxy", required=True)
    p.add_argument("--candidate", help="PNG pass-through candidate image")
    p.add_argument("--prompt", default="generic")
    p.add_argument("--lambda", type=float, default=1.0, dest="lam")
    p.add_argument("--s-end", type=float, default=1.0, dest="s_end")
    p.add_argument("--n-samples", type=int, default=256, dest="n_samples")
    p.add_argument("--n-candidates", type=int, default=1)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="regenerate selected proxy parts")
    client_opts(p)
    p.add_argument("--session", required=True)
    p.add_argument("--parts", required=True, help="comma-separated part ids, e.g. 2,3")
    p.add_argument("--view", help="edit view, e.g. az=180,el=-30")
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--prompt")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("preview", help="render a cached-volume preview")
    client_opts(p)
    p.add_argument("--session", required=True)
    p.add_argument("--az", type=float, default=0.0)
    p.add_argument("--el", type=float, default=-30.0)
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_preview)

    p = sub.add_parser("reconstruct", help="fit the SDF field and export a mesh")
    client_opts(p)
    p.add_argument("--session", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--no-volume-guidance", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("serve", help="run the studio service")
    p.add_argument("--config")
    p.add_argument("--data-dir")
    p.add_argument("--checkpoint")
    p.add_argument("--port", type=int)
    p.add_argument("--frontend", help="built frontend directory to serve at /app")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("selftest", help="run the deterministic oracle checks")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except VoxError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
