"""
A lightweight cli framework.

Commands are Command subclasses registered with the 'handler' decorator.
Call with 'synthprobe [command] [arguments]' from the shell. The exit code
is the only machine-readable result:

    0  success
    2  invalid configuration
    3  generation budget exhausted, or missing/corrupt data
    4  verification failed
    5  equivariance deviation above tolerance
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from synthprobe import config, datasets, lambdalayer, metrics, rde, trainer
from synthprobe.config import ConfigError
from synthprobe.rde import GenerationError
from synthprobe.tensor import DataError, UsageError

logger = logging.getLogger("synthprobe.cli")

OK, CONFIG, DATA, UNVERIFIED, NOT_EQUIVARIANT = 0, 2, 3, 4, 5

handlers = {}

def handler(help = "", inname = None):
    """
    Decorator bind a class as a handler for a cli command.

    help    specifies the help message to display
    inname  specifies the name of the handler, otherwise infer
    """
    def decorator(func):
        if inname is None:
            name = func.__name__.replace("_", "-")
        else:
            name = inname
        handlers[name.lower()] = func, help
        return func
    return decorator

commonparser = argparse.ArgumentParser(add_help = False)
commonparser.add_argument("--out", default = ".")
commonparser.add_argument("--verbose", "-v", action = "count", default = 0)

class Command(object):
    name = None

    def __init__(self, args):
        self.name = self.name or type(self).__name__.replace("_", "-")
        parser = self.setup()
        parser.prog = "synthprobe {0}".format(self.name)
        args = parser.parse_args(args)
        if args.verbose:
            logging.getLogger("synthprobe").setLevel(
                logging.INFO if args.verbose == 1 else logging.DEBUG)
        if not os.path.isdir(args.out):
            os.makedirs(args.out)
        self.echo = {"command": self.name, "args": dict(vars(args))}
        try:
            self.status = self(args)
        finally:
            self.writeecho(args.out)

    def setup(self):
        return argparse.ArgumentParser(parents = [commonparser])

    def __call__(self, args):
        raise NotImplementedError("__call__() must be defined")

    def writeecho(self, out):
        """
        run.json: the resolved configuration of this invocation.
        """
        with open(os.path.join(out, "run.json"), "w") as f:
            json.dump(self.echo, f, indent = 2, sort_keys = True, default = str)

def summarize(manifest):
    counts = manifest.counts()
    return "train: {0}, test: {1}".format(counts.get("train", 0),
                                          counts.get("test", 0))

@handler("Generate Rectangle Depth Estimation scenes")
class gen_rde(Command):
    name = "gen-rde"

    def setup(self):
        parser = argparse.ArgumentParser(parents = [commonparser])
        parser.add_argument("--count", type = int, default = 1000)
        parser.add_argument("--test-count", type = int, default = 0)
        parser.add_argument("--seed", type = int, default = 0)
        parser.add_argument("--width", type = int, default = 128)
        parser.add_argument("--height", type = int, default = 128)
        parser.add_argument("--n-rects", type = int, default = 10)
        parser.add_argument("--n-rects-max", type = int, default = None)
        parser.add_argument("--min-side", type = int, default = 12)
        parser.add_argument("--max-side", type = int, default = 96)
        parser.add_argument("--min-visible-frac", type = float, default = 0.05)
        parser.add_argument("--retry-budget", type = int, default = 10000)
        parser.add_argument("--no-filter", action = "store_true")
        parser.add_argument("--image-format", choices = ["png", "ppm"],
                            default = "png")
        parser.add_argument("--label-format", choices = ["png", "synt"],
                            default = "png")
        return parser

    def __call__(self, args):
        if args.count < 0 or args.test_count < 0:
            raise ConfigError("Counts must not be negative")
        cfg = rde.RDEConfig(width = args.width, height = args.height,
                            n_rects = args.n_rects,
                            n_rects_max = args.n_rects_max,
                            min_side = args.min_side, max_side = args.max_side,
                            min_visible_frac = args.min_visible_frac,
                            retry_budget = args.retry_budget,
                            filter = not args.no_filter)
        self.echo["config"] = cfg.validate().todict()
        manifest, stats = datasets.build_rde(args.out, args.count,
            args.test_count, args.seed, cfg, args.image_format,
            args.label_format)
        self.echo["manifest"] = manifest.digest()
        print(summarize(manifest))
        print("rejection rate: {0:.4f}".format(stats["rejection_rate"]))
        print("occlusion rate: {0:.4f}".format(stats["occlusion_rate"]))
        return OK

@handler("Generate the Centered Square dataset")
class gen_square(Command):
    name = "gen-square"

    def setup(self):
        parser = argparse.ArgumentParser(parents = [commonparser])
        parser.add_argument("--H", type = int, default = 64)
        parser.add_argument("--W", type = int, default = 64)
        parser.add_argument("--w", type = int, default = 21)
        return parser

    def __call__(self, args):
        manifest = datasets.build_square(args.out, args.H, args.W, args.w)
        self.echo["manifest"] = manifest.digest()
        print(summarize(manifest))
        return OK

@handler("Generate the Color Code dataset")
class gen_colorcode(Command):
    name = "gen-colorcode"

    def setup(self):
        parser = argparse.ArgumentParser(parents = [commonparser])
        parser.add_argument("--count", type = int, default = 5000)
        parser.add_argument("--test-count", type = int, default = 0)
        parser.add_argument("--seed", type = int, default = 0)
        parser.add_argument("--N", type = int, default = 128)
        parser.add_argument("--k", type = int, default = 10)
        parser.add_argument("--Z", type = int, default = 32)
        parser.add_argument("--mask-frac", type = float, default = 0.5)
        parser.add_argument("--min-color-dist", type = int, default = 0)
        parser.add_argument("--retry-budget", type = int, default = 1000)
        parser.add_argument("--no-repair", action = "store_true",
                            help = argparse.SUPPRESS)
        return parser

    def __call__(self, args):
        if args.count < 0 or args.test_count < 0:
            raise ConfigError("Counts must not be negative")
        cfg = datasets.ColorCodeConfig(n = args.N, k = args.k, z = args.Z,
            mask_frac = args.mask_frac, min_color_dist = args.min_color_dist,
            retry_budget = args.retry_budget, repair = not args.no_repair)
        self.echo["config"] = cfg.validate().todict()
        manifest = datasets.build_colorcode(args.out, args.count,
                                            args.test_count, args.seed, cfg)
        self.echo["manifest"] = manifest.digest()
        print(summarize(manifest))
        return OK

@handler("Check that every sample of a dataset is well-posed")
class verify(Command):
    def setup(self):
        parser = argparse.ArgumentParser(parents = [commonparser])
        parser.add_argument("--manifest", required = True)
        parser.add_argument("--min-visible-frac", type = float, default = 0.05)
        return parser

    def __call__(self, args):
        manifest = datasets.DatasetManifest.load(args.manifest)
        failed = []
        for record in manifest.records:
            verdict = datasets.verify_record(manifest, record,
                                             args.min_visible_frac)
            if not verdict:
                failed.append(record["id"])
                print("{0}: {1} {2}".format(record["id"], verdict.reason,
                                            verdict.detail))
        self.echo["manifest"] = manifest.digest()
        self.echo["failed"] = failed
        print("{0} samples, {1} failed".format(len(manifest.records),
                                               len(failed)))
        return UNVERIFIED if failed else OK

@handler("Train a lambda network from an experiment config")
class train(Command):
    def setup(self):
        parser = argparse.ArgumentParser(parents = [commonparser])
        parser.add_argument("--config", required = True,
            help = "experiment JSON file or name of a bundled experiment")
        return parser

    def __call__(self, args):
        path = args.config
        if not os.path.exists(path):
            path = config.bundled(path)
        experiment = config.load_experiment(path)
        self.echo["config"] = experiment.todict()
        document = trainer.run_experiment(experiment, args.out)
        for split in ("train", "test"):
            values = metrics.EvalReport.fromdict(
                document["reports"][split]).scaled()
            print("{0}: {1}".format(split, ", ".join("{0} {1:.2f}".format(k, v)
                  for k, v in sorted(values.items()))))
        with open(os.path.join(args.out, "run.json")) as f:
            self.echo.update(json.load(f))
        return OK

@handler("Evaluate trained weights or stored depth maps on a dataset split")
class eval(Command):
    def setup(self):
        parser = argparse.ArgumentParser(parents = [commonparser])
        parser.add_argument("--weights", default = None)
        parser.add_argument("--predictions", default = None,
            help = "directory of <id>.synt depth maps for an RDE manifest")
        parser.add_argument("--pair-seed", type = int, default = 0)
        parser.add_argument("--manifest", required = True)
        parser.add_argument("--split", default = "test")
        return parser

    def __call__(self, args):
        if bool(args.weights) == bool(args.predictions):
            raise ConfigError("Give exactly one of --weights, --predictions")
        manifest = datasets.DatasetManifest.load(args.manifest)
        if args.predictions:
            report = trainer.evaluate_depth_maps(manifest, args.split,
                                                 args.predictions,
                                                 args.pair_seed)
        else:
            net = trainer.load_net(args.weights)
            report = trainer.evaluate(net, manifest, args.split)
            self.echo["weights"] = trainer.weights_digest(net)
        report.save(os.path.join(args.out, "eval_report.json"))
        self.echo["manifest"] = manifest.digest()
        for name, value in sorted(report.scaled().items()):
            print("{0:>20}   {1:.2f}".format(name, value))
        return OK

def parseshifts(text, geometry, rng):
    """
    all | random:k | perm:k. Permutations are returned as index arrays.
    """
    everything = lambdalayer.enumerate_shifts(geometry)
    if text == "all":
        return everything
    kind, _, count = text.partition(":")
    try:
        count = int(count)
    except ValueError:
        raise ConfigError("Bad --shifts {0!r}".format(text))
    if kind == "random":
        picked = rng.choice(len(everything), size = min(count, len(everything)),
                            replace = False)
        return [everything[i] for i in sorted(picked)]
    if kind == "perm":
        total = int(np.prod(geometry))
        return [rng.permutation(total) for _ in range(count)]
    raise ConfigError("Bad --shifts {0!r}".format(text))

@handler("Measure the translation equivariance of a layer")
class equiv_check(Command):
    name = "equiv-check"

    def setup(self):
        parser = argparse.ArgumentParser(parents = [commonparser])
        parser.add_argument("--weights", default = None)
        parser.add_argument("--layer", type = int, default = 0)
        parser.add_argument("--encoding", default = "fourier_decor",
                            choices = config.ENCODINGS)
        parser.add_argument("--tt", action = "store_true")
        parser.add_argument("--length", type = int, default = None)
        parser.add_argument("--height", type = int, default = None)
        parser.add_argument("--width", type = int, default = None)
        parser.add_argument("--channels", type = int, default = 8)
        parser.add_argument("--m", type = int, default = 8)
        parser.add_argument("--c-pe", type = int, default = 8)
        parser.add_argument("--seed", type = int, default = 0)
        parser.add_argument("--shifts", default = "all")
        parser.add_argument("--tol", type = float, default = 1e-4)
        return parser

    def layer(self, args):
        if args.weights:
            try:
                return lambdalayer.Layer.load(args.weights)
            except UsageError:
                net = trainer.load_net(args.weights)
            prefix = "body{0}.".format(args.layer)
            weights = dict((k[len(prefix):], v) for k, v in net.params.items()
                           if k.startswith(prefix))
            if not weights:
                raise ConfigError("Network has no layer {0}".format(args.layer))
            return lambdalayer.Layer(net.layer,
                                     lambdalayer.LambdaWeights(**weights),
                                     net.pe)
        if args.length:
            geometry = (args.length,)
        elif args.height and args.width:
            geometry = (args.height, args.width)
        else:
            raise ConfigError("Give --weights, --length or --height/--width")
        cfg = lambdalayer.LambdaConfig(c_in = args.channels,
            c_out = args.channels, m = args.m, c_pe = args.c_pe,
            encoding = args.encoding, tt = args.tt, geometry = geometry)
        return lambdalayer.Layer(cfg, lambdalayer.random_weights(cfg, args.seed))

    def __call__(self, args):
        layer = self.layer(args)
        geometry = layer.cfg.geometry
        rng = np.random.default_rng(args.seed)
        x = rng.standard_normal((layer.cfg.c_in, layer.cfg.positions))
        x = x.astype(np.float32)
        shifts = parseshifts(args.shifts, geometry, rng)
        permutation = args.shifts.startswith("perm")
        worst = 0.0
        for shift in shifts:
            if permutation:
                deviation = lambdalayer.equivariance_probe(layer, x, shift)
                shown = "perm"
            else:
                deviation = lambdalayer.equivariance_probe(layer, x, shift,
                                                           geometry)
                shown = shift
            worst = max(worst, deviation)
            print("{0:>15}   {1:.3e}".format(str(shown), deviation))
        print("{0} shifts, max deviation {1:.3e}".format(len(shifts), worst))
        self.echo["layer"] = layer.cfg.todict()
        self.echo["max_deviation"] = worst
        return NOT_EQUIVARIANT if worst > args.tol else OK

def loadrun(directory):
    path = os.path.join(directory, "report.json")
    try:
        with open(path) as f:
            return json.load(f)
    except IOError:
        raise DataError("Missing report {0}".format(path))
    except ValueError as e:
        raise DataError("{0} is not a report: {1}".format(path, e))

def tabulate(runs):
    """
    One row per run: name, experiment, variant, metric, train, test, gap.
    Scores are scaled by 100; the best value of a column is flagged.
    """
    rows = []
    for directory, document in runs:
        train = metrics.EvalReport.fromdict(document["reports"]["train"])
        test = metrics.EvalReport.fromdict(document["reports"]["test"])
        metric = "iou" if "iou" in test.values else "masked_accuracy"
        rows.append({"run": os.path.basename(os.path.normpath(directory)),
                     "experiment": document["experiment"],
                     "variant": document["variant"], "metric": metric,
                     "train": train.scaled().get(metric),
                     "test": test.scaled().get(metric),
                     "gap": test.scaled().get("generalization_gap")})
    best = {}
    for column, pick in (("train", max), ("test", max), ("gap", min)):
        values = [r[column] for r in rows if r[column] is not None]
        if len(values) > 1:
            best[column] = pick(values)
    for row in rows:
        row["best"] = sorted(c for c in best if row[c] == best[c])
    return rows

@handler("Compare the reports of several runs")
class report(Command):
    def setup(self):
        parser = argparse.ArgumentParser(parents = [commonparser])
        parser.add_argument("--runs", nargs = "+", required = True)
        parser.add_argument("--csv", action = "store_true")
        parser.add_argument("--database", default = None)
        return parser

    def __call__(self, args):
        runs = [(d, loadrun(d)) for d in args.runs]
        if args.database:
            from synthprobe.models import Run
            for directory, document in runs:
                Run.record(directory, document, args.database)
            runs = Run.all(args.database)
        rows = tabulate(runs)
        columns = ["run", "experiment", "variant", "metric", "train", "test",
                   "gap"]
        if args.csv:
            writer = csv.writer(sys.stdout)
            writer.writerow(columns + ["best"])
            for row in rows:
                writer.writerow([row[c] for c in columns] +
                                [" ".join(row["best"])])
        else:
            print("{0:<20} {1:<24} {2:<16} {3:<16} {4:>8} {5:>8} {6:>8}".format(
                *columns))
            for row in rows:
                cells = []
                for c in ("train", "test", "gap"):
                    value = "-" if row[c] is None else "{0:.2f}".format(row[c])
                    cells.append(value + ("*" if c in row["best"] else " "))
                print("{0:<20} {1:<24} {2:<16} {3:<16} {4:>9}{5:>9}{6:>9}".format(
                    row["run"], row["experiment"], row["variant"],
                    row["metric"], *cells))
        self.echo["rows"] = rows
        return OK

def main(args = None):
    """
    Dispatches the cli command through a given handler; returns the exit
    code.
    """
    if args is None:
        args = sys.argv[1:]
    logging.basicConfig(level = config.loglevel)
    try:
        args[0]
    except IndexError:
        help()
        return OK
    try:
        command = handlers[args[0]][0]
    except KeyError:
        print("Error: Unknown action {0}".format(args[0]))
        return CONFIG
    try:
        return command(args[1:]).status
    except ConfigError as e:
        print("Error: {0}".format(e))
        return CONFIG
    except (GenerationError, DataError) as e:
        print("Error: {0}".format(e))
        return DATA

def help(args = None):
    """
    Print the help information.
    """
    for action, (_, help) in sorted(handlers.items()):
        print("{0:>15}   {1:<50}".format(action, help))
