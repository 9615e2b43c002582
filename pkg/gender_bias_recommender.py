#!/usr/bin/env python3

import argparse
import logging
import sys
import traceback
from pathlib import Path

from components import experiment
from components.bias import estimate_user_bias
from components.config import read_config_file, validate_config
from components.dataset import dataset_summary, load_ratings, save_catalog, save_ratings
from components.enrichment import EnrichmentConfig, enrich_catalog
from components.errors import BiasLabException, ConfigError
from components.synth import GenerativeConfig, generate_dataset, save_synthetic

EXIT_OK = experiment.EXIT_OK
EXIT_FAILED = experiment.EXIT_FAILED
EXIT_PARTIAL = experiment.EXIT_PARTIAL
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOOKUP_CACHE = "lookup_cache.jsonl"

_logger = logging.getLogger("gender_bias_recommender")


def _overrides(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = str(args.out)
    return overrides


def _out_dir(args, config) -> Path:
    return Path(args.out) if args.out is not None else Path(config.output_dir)


def cmd_enrich(args) -> int:
    data = read_config_file(args.config).get("enrichment", {}) if args.config else {}
    config = validate_config(EnrichmentConfig, data, source="enrichment config")
    if args.offline:
        config = config.model_copy(update={"offline": True})
    if args.fixtures:
        config = config.model_copy(update={"fixtures": tuple(config.fixtures) + tuple(args.fixtures)})
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if args.cache or config.cache_path is None:
        config = config.model_copy(update={"cache_path": str(args.cache or out / LOOKUP_CACHE)})

    ds = load_ratings(args.ratings, args.scale_max, delimiter=args.delimiter, max_bad_rows=args.max_bad_rows)
    catalog, drops = enrich_catalog(list(ds.items), config)
    save_catalog(catalog, out / "catalog.csv")
    drops.save(out / "drops.csv")
    print("Labelled [%s] items, dropped [%s]; wrote %s" % (len(catalog), len(drops), out))
    if len(catalog) == 0 and len(drops) > 0:
        _logger.warning("Every item was dropped")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_prepare(args) -> int:
    config = experiment.load_experiment_config(args.config, _overrides(args))
    if config.data is None:
        raise ConfigError("prepare needs a 'data' section")
    ds = experiment.prepare_dataset(config)
    out = _out_dir(args, config)
    out.mkdir(parents=True, exist_ok=True)
    save_ratings(ds, out / "ratings.csv", delimiter=",")
    save_catalog(ds.require_catalog(), out / "catalog.csv")
    experiment.write_input_bias(estimate_user_bias(ds), out, config.evaluation.bin_width)
    summary = dataset_summary(ds)
    for key in ("advantaged_items", "disadvantaged_items", "users", "ratings"):
        print("%s=%s" % (key, summary[key]))
    return EXIT_OK


def cmd_synth(args) -> int:
    data = read_config_file(args.config).get("synth", {}) if args.config else {}
    if args.seed is not None:
        data = dict(data, seed=args.seed)
    config = validate_config(GenerativeConfig, data, source="synth config")
    out = Path(args.out or "synthetic")
    paths = save_synthetic(generate_dataset(config), out)
    print("Wrote %s" % ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_run(args) -> int:
    config = experiment.load_experiment_config(args.config, _overrides(args))
    result = experiment.run_experiment(config, _out_dir(args, config))
    print("Run [%s] %s; outputs in %s" % (config.name, result.manifest.status, result.run_dir))
    return result.exit_code


def cmd_report(args) -> int:
    experiment.write_report(args.run_dir)
    code = experiment.report_status(args.run_dir)
    print("Report written to %s%s" % (args.run_dir, " (with gaps)" if code else ""))
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Measure and reduce gender bias in rating-based recommendations")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    enrich = sub.add_parser("enrich", help="label items by author gender")
    enrich.add_argument("ratings")
    enrich.add_argument("--scale-max", type=float, required=True)
    enrich.add_argument("--delimiter", default=",")
    enrich.add_argument("--max-bad-rows", type=int, default=0)
    enrich.add_argument("--config")
    enrich.add_argument("--fixtures", nargs="*", default=[])
    enrich.add_argument("--offline", action="store_true", help="cache and fixtures only, no network")
    enrich.add_argument("--cache", help="lookup cache file, default <out>/%s" % LOOKUP_CACHE)
    enrich.add_argument("--out")
    enrich.set_defaults(handler=cmd_enrich)

    prepare = sub.add_parser("prepare", help="load and filter a dataset, report its input log-bias")
    prepare.add_argument("--config", required=True)
    prepare.add_argument("--out")
    prepare.add_argument("--seed", type=int)
    prepare.set_defaults(handler=cmd_prepare)

    synth = sub.add_parser("synth", help="generate a synthetic dataset with known bias")
    synth.add_argument("--config")
    synth.add_argument("--out")
    synth.add_argument("--seed", type=int)
    synth.set_defaults(handler=cmd_synth)

    run = sub.add_parser("run", help="run every algorithm x mode cell of an experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--seed", type=int)
    run.set_defaults(handler=cmd_run)

    report = sub.add_parser("report", help="rebuild the summary tables of a run directory")
    report.add_argument("run_dir")
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT, stream=sys.stderr)
    try:
        return args.handler(args)
    except KeyboardInterrupt:
        print("Detected Ctrl-C, quitting", file=sys.stderr)
        return EXIT_FAILED
    except BiasLabException as e:
        _logger.error("%s failed: %s", args.command, e)
        return EXIT_FAILED
    except Exception:
        traceback.print_exc()
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
