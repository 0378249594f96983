"""Command line entry point: ``fedwind run|search|gen|serve``.

``run`` and ``search`` execute locally unless ``--api`` names a running
service, in which case the request is forwarded and the CLI only prints.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .errors import FedWindError

log = logging.getLogger("fedwind")


def _print_summary(table) -> None:
    for s in table.strategies:
        line = f"{s}: mean rmse {table.mean('rmse', s):.6f}"
        for kind in ("scarce", "representative"):
            if any(r.kind == kind for r in table.rows):
                line += f"  {kind} {table.mean('rmse', s, kind):.6f}"
        print(line, file=sys.stderr)


def _api_client(url: str):
    import httpx

    return httpx.Client(base_url=url.rstrip("/"), timeout=None)


def cmd_run(args) -> int:
    from .experiment import ExperimentConfig, emit_report, load_config, report_csv, run_experiment

    config = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.transport:
        updates["transport"] = args.transport
    address = args.listen or args.serve
    if address:
        updates["listen"] = address
        updates.setdefault("transport", "tcp")
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.workers is not None:
        updates["workers"] = args.workers
    if updates:
        config = ExperimentConfig.model_validate({**config.model_dump(by_alias=True), **updates})

    if args.api:
        with _api_client(args.api) as client:
            body = {"config": config.model_dump(mode="json", by_alias=True), "wait": False}
            r = client.post("/experiments", json=body)
            r.raise_for_status()
            job = r.json()
            while job["status"] in ("queued", "running"):
                time.sleep(args.poll)
                job = client.get(f"/experiments/{job['id']}").json()
            if job["status"] != "done":
                raise FedWindError(f"remote job failed: {job['error']}")
            text = client.get(f"/experiments/{job['id']}/report.csv").text
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return 0

    table = run_experiment(config)
    if args.out:
        emit_report(table, args.out)
        log.info("report written to %s", args.out)
    else:
        sys.stdout.write(report_csv(table))
    _print_summary(table)
    return 0


def cmd_search(args) -> int:
    from .experiment import random_model_search, search_dataset

    if args.api:
        with _api_client(args.api) as client:
            body = {"case": args.case, "trials": args.trials, "seed": args.seed, "max_epochs": args.max_epochs,
                    "csv_path": args.data}
            r = client.post("/search", json=body)
            r.raise_for_status()
            doc = r.json()
    else:
        data = search_dataset(args.case, args.seed, args.data)
        doc = random_model_search(data, args.case, args.trials, args.seed, args.max_epochs).to_dict()
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    print(f"best: hidden={doc['architecture']['hidden']} lr={doc['learning_rate']:.6g} "
          f"test rmse={doc['test_rmse']:.6f} params={doc['n_params']}", file=sys.stderr)
    return 0


def cmd_gen(args) -> int:
    from .data import SyntheticFleetConfig, export_fleet, generate_synthetic_fleet

    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("seed", "n_turbines", "rows_per_turbine"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if "n_turbines" in overrides and "n_scarce" not in overrides:
        overrides["n_scarce"] = min(5, overrides["n_turbines"])
    try:
        cfg = SyntheticFleetConfig(**overrides)
    except TypeError as exc:
        raise FedWindError(f"bad fleet config: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = export_fleet(generate_synthetic_fleet(cfg), out)
    for p in paths:
        print(p)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("fedwind.service.app:app", host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedwind", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train strategies A/B/C and write the report CSV")
    run.add_argument("--config", help="JSON experiment config")
    run.add_argument("--transport", choices=("inproc", "tcp"))
    run.add_argument("--listen", metavar="HOST:PORT", help="TCP address the federation server binds")
    run.add_argument("--serve", metavar="HOST:PORT", help="alias of --listen")
    run.add_argument("--out", help="report CSV path (stdout if omitted)")
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--api", metavar="URL", help="submit to a running fedwind service instead")
    run.add_argument("--poll", type=float, default=1.0, help=argparse.SUPPRESS)
    run.set_defaults(func=cmd_run)

    search = sub.add_parser("search", help="random architecture / learning-rate search")
    search.add_argument("--case", choices=("power_curve", "bearing_temp"), default="power_curve")
    search.add_argument("--trials", type=int, default=100)
    search.add_argument("--seed", type=int, default=0)
    search.add_argument("--max-epochs", type=int, default=150)
    search.add_argument("--data", help="CSV file or directory of the public turbine (synthetic if omitted)")
    search.add_argument("--out", help="write the result JSON here")
    search.add_argument("--api", metavar="URL")
    search.set_defaults(func=cmd_search)

    gen = sub.add_parser("gen", help="write a synthetic fleet as one CSV per turbine")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--config", help="JSON object of fleet settings")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--n-turbines", dest="n_turbines", type=int)
    gen.add_argument("--rows", dest="rows_per_turbine", type=int)
    gen.set_defaults(func=cmd_gen)

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FedWindError, OSError, ValueError) as exc:
        print(f"fedwind: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # httpx errors and the like
        print(f"fedwind: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
