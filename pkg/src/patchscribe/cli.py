"""Command-line entry point.

One subcommand per pipeline stage plus corpus packaging, statistics, and
an end-to-end runner. Flags override the config file; the effective
configuration is logged at startup. Exit codes: 0 success, 1 when some
records failed, 2 for configuration or usage problems.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import metrics, pipeline, shards
from .config import Config, ConfigError, dump_config, load_config
from .imagesource import LocalImageSource
from .llm import HTTPCompletionClient, MockCompletionClient
from .osm import OverpassClient
from .prompts import MetaExampleSet, load_meta_examples
from .store import (
    STATUS_CAPTIONED,
    STATUS_NEW,
    STATUS_OSM_FETCHED,
    PipelineStore,
)
from .tagwiki import TagWiki, load_wiki

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

_COMMANDS = (
    "init",
    "fetch",
    "caption",
    "augment",
    "refine",
    "compile",
    "stats",
    "run-all",
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="YAML config file")
    common.add_argument("--batch", type=int, help="max patches to process this run")
    common.add_argument("--workers", type=int, help="concurrent workers")
    common.add_argument("--seed", type=int, help="base seed for all drawing")
    common.add_argument(
        "--mock-llm",
        action="store_true",
        default=None,
        help="use the offline deterministic completion client",
    )

    parser = argparse.ArgumentParser(
        prog="patchscribe",
        description="Batch pipeline turning image patches plus map data into caption corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "init": "register patches from the image directory index",
        "fetch": "download and cache map context for NEW patches",
        "caption": "write raw captions for fetched patches",
        "augment": "add caption variations up to each patch's target",
        "refine": "fix and dedupe caption sets, promoting finished patches",
        "compile": "pack finished patches into tar shards",
        "stats": "write corpus statistics reports",
        "run-all": "run every stage to completion, then compile and stats",
    }
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def apply_overrides(config: Config, args: argparse.Namespace) -> Config:
    if args.batch is not None:
        config.batch = args.batch
    if args.workers is not None:
        config.workers = args.workers
    if args.seed is not None:
        config.seed = args.seed
    if args.mock_llm is not None:
        config.mock_llm = args.mock_llm
    config.validate()
    return config


def make_fetcher(config: Config) -> pipeline.Fetcher:
    url = config.overpass_url
    if url.startswith("fixture:"):
        return pipeline.FixtureFetcher(url[len("fixture:") :])
    client = OverpassClient(
        url,
        min_interval_s=config.overpass_min_interval_s,
        max_concurrency=config.overpass_max_concurrency,
        max_retries=config.overpass_max_retries,
        timeout_s=config.overpass_timeout_s,
    )
    return pipeline.OverpassFetcher(client)


def make_llm(config: Config) -> pipeline.CompletionClient:
    if config.mock_llm:
        return MockCompletionClient()
    if not config.llm_url:
        raise ConfigError("llm_url is required unless --mock-llm is given")
    return HTTPCompletionClient(
        config.llm_url,
        model=config.llm_model or None,
        token_env=config.llm_token_env,
        max_concurrency=config.llm_max_concurrency,
        max_retries=config.llm_max_retries,
        timeout_s=config.llm_timeout_s,
    )


def _wiki(config: Config) -> TagWiki:
    return load_wiki(config.wiki_path or None)


def _meta(config: Config) -> MetaExampleSet:
    return load_meta_examples(config.meta_examples_path or None)


def _summary(report: pipeline.StageReport) -> str:
    return (
        f"{report.stage}: {report.processed} processed"
        f" ({report.succeeded} succeeded, {report.skipped} skipped,"
        f" {report.failed} failed)"
    )


def _register(store: PipelineStore, config: Config) -> str:
    source = LocalImageSource(config.images_dir)
    added = 0
    present = 0
    for entry in source.entries():
        if store.add_patch(
            entry.patch_id, entry.frame(), entry.geo_bbox(), entry.image_ref
        ):
            added += 1
        else:
            present += 1
    return f"init: {added} registered, {present} already present"


def _exit_for(reports: list[pipeline.StageReport]) -> int:
    return EXIT_PARTIAL if any(r.failed for r in reports) else EXIT_OK


def run_command(command: str, config: Config) -> int:
    Path(config.store_path).parent.mkdir(parents=True, exist_ok=True)
    store = PipelineStore(config.store_path)
    try:
        if command == "init":
            print(_register(store, config))
            return EXIT_OK

        if command == "fetch":
            report = pipeline.run_fetch(
                store,
                make_fetcher(config),
                workers=config.workers,
                batch=config.batch,
                lease_s=config.lease_s,
            )
            print(_summary(report))
            return _exit_for([report])

        if command == "caption":
            report = pipeline.run_caption(
                store,
                make_llm(config),
                wiki=_wiki(config),
                workers=config.workers,
                batch=config.batch,
                lease_s=config.lease_s,
            )
            print(_summary(report))
            return _exit_for([report])

        if command == "augment":
            report = pipeline.run_augment(
                store,
                make_llm(config),
                meta=_meta(config),
                seed=config.seed,
                two_probability=config.two_probability,
                workers=config.workers,
                batch=config.batch,
                lease_s=config.lease_s,
            )
            print(_summary(report))
            return _exit_for([report])

        if command == "refine":
            report = pipeline.run_refine(
                store,
                workers=config.workers,
                batch=config.batch,
                lease_s=config.lease_s,
            )
            print(_summary(report))
            return _exit_for([report])

        if command == "compile":
            manifest = shards.write_shards(
                store,
                LocalImageSource(config.images_dir),
                config.out_dir,
                config.samples_per_shard,
            )
            print(
                f"compile: {manifest.total_samples} samples in"
                f" {len(manifest.entries)} shards -> {config.out_dir}"
            )
            return EXIT_OK

        if command == "stats":
            report = metrics.corpus_stats(store)
            metrics.write_report(report, config.reports_dir)
            print(
                f"stats: {report.patch_count} patches,"
                f" {report.caption_count} captions -> {config.reports_dir}"
            )
            return EXIT_OK

        if command == "run-all":
            print(_register(store, config))
            reports = pipeline.run_all(
                store,
                make_fetcher(config),
                make_llm(config),
                wiki=_wiki(config),
                meta=_meta(config),
                seed=config.seed,
                two_probability=config.two_probability,
                workers=config.workers,
                batch=config.batch,
                lease_s=config.lease_s,
                max_rounds=config.max_rounds,
            )
            for report in reports:
                print(_summary(report))
            manifest = shards.write_shards(
                store,
                LocalImageSource(config.images_dir),
                config.out_dir,
                config.samples_per_shard,
            )
            print(
                f"compile: {manifest.total_samples} samples in"
                f" {len(manifest.entries)} shards -> {config.out_dir}"
            )
            stats = metrics.corpus_stats(store)
            metrics.write_report(stats, config.reports_dir)
            print(
                f"stats: {stats.patch_count} patches,"
                f" {stats.caption_count} captions -> {config.reports_dir}"
            )
            counts = store.status_counts()
            unfinished = sum(
                counts.get(s, 0)
                for s in (STATUS_NEW, STATUS_OSM_FETCHED, STATUS_CAPTIONED)
            )
            if unfinished:
                print(f"run-all: {unfinished} patches left unfinished")
                return EXIT_PARTIAL
            return _exit_for(reports)

        raise ConfigError(f"unknown command: {command}")
    finally:
        store.close()


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        config = apply_overrides(load_config(args.config), args)
        log.info(
            "%s",
            json.dumps(
                {"record": "effective_config", **dataclasses.asdict(config)},
                sort_keys=True,
            ),
        )
        return run_command(args.command, config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
