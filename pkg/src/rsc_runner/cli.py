"""Command-line interface: subcommands, config flags and exit codes."""
import argparse
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from rsc_engine import __version__
from rsc_engine.ablation import AblationError
from rsc_engine.gradcheck import SUITES
from rsc_engine.network import SchemeMismatchError

from .commands import cmd_ablate, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train
from .config import ConfigError, RunConfig, iter_keys, load_config, parse_value


logger = logging.getLogger('rsc_runner')

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

VALIDATION_ERRORS = (ConfigError, SchemeMismatchError, AblationError, FileNotFoundError)

# flag -> (dotted key, type, help)
ALIASES = {
    '--seed': ('seed', int, "Run seed (falls back to RSC_SEED, then 0)"),
    '--out': ('output_dir', str, "Output directory"),
    '--data': ('data.path', str, "Dataset directory"),
    '--checkpoint': ('eval.checkpoint', str, "Checkpoint to evaluate"),
    '--n': ('data.n', int, "Training samples to generate"),
    '--n-eval': ('data.n_eval', int, "Evaluation samples to generate"),
    '--p3d': ('data.p3d', float, "Probability of 3D labels per sample"),
    '--jobs': ('data.jobs', int, "Parallel generation jobs"),
}

COMMANDS = {
    'gen-data': (cmd_gen_data, "Synthesize a dataset"),
    'train': (cmd_train, "Train a network on the train split"),
    'eval': (cmd_eval, "Evaluate a checkpoint at the range midpoints"),
    'ablate': (cmd_ablate, "Train and evaluate the ablation cells"),
    'gradcheck': (cmd_gradcheck, "Run the finite-difference gradient suites"),
}


class StrictParser(argparse.ArgumentParser):
    """Argument parser whose usage errors become validation errors."""

    def error(self, message: str):
        raise ConfigError(f"<args>: {message}")


def _flag_help(field) -> str:
    default = field.default if field.default_factory is None else field.default_factory()
    text = field.description or ''
    return f"{text} (default: {default!r})".strip()


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One --section.field flag per config leaf plus the short aliases."""
    parser.add_argument('--config', dest='config_file', metavar='PATH', help="YAML config file")
    for flag, (key, kind, text) in ALIASES.items():
        parser.add_argument(flag, dest=f'alias:{key}', type=kind, default=argparse.SUPPRESS, help=text)
    parser.add_argument('--dump-ppm', dest='alias:data.dump_ppm', type=int, nargs='?', const=4,
                        default=argparse.SUPPRESS, metavar='COUNT',
                        help="Write PPM pyramids of the first COUNT samples (default 4)")
    parser.add_argument('--cells', dest='alias:ablation.cells', default=argparse.SUPPRESS,
                        help="Comma-separated ablation cells")

    group = parser.add_argument_group('config keys')
    for key, field in iter_keys(RunConfig):
        if f"--{key}" in ALIASES:
            continue
        group.add_argument(f'--{key}', dest=f'key:{key}', metavar='VALUE', default=argparse.SUPPRESS,
                           help=_flag_help(field))


def build_parser() -> argparse.ArgumentParser:
    parser = StrictParser(prog='rsc', description="Resolution-aware human mesh recovery at desk scale")
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
    subparsers.required = True
    for name, (_, text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=text, description=text)
        add_config_flags(sub)
        if name == 'gradcheck':
            sub.add_argument('--suites', default=None,
                             help=f"Comma-separated suites ({', '.join(SUITES)}); default all")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted overrides from parsed flags; explicit keys win over aliases."""
    overrides: Dict[str, Any] = {}
    explicit: Dict[str, Any] = {}
    for dest, value in vars(args).items():
        if dest.startswith('alias:'):
            key = dest[len('alias:'):]
            if key == 'ablation.cells':
                value = [c.strip() for c in value.split(',') if c.strip()]
            overrides[key] = value
        elif dest.startswith('key:'):
            explicit[dest[len('key:'):]] = parse_value(value)
    overrides.update(explicit)
    return overrides


def _split_list(text: Optional[str]) -> Optional[List[str]]:
    if not text:
        return None
    return [s.strip() for s in text.split(',') if s.strip()]


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, dispatch the subcommand and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        config = load_config(args.config_file, collect_overrides(args))
        handler = COMMANDS[args.command][0]
        if args.command == 'gradcheck':
            suites = _split_list(args.suites)
            for name in suites or []:
                if name not in SUITES:
                    raise ConfigError(f"--suites: unknown suite '{name}'")
            return handler(config, suites)
        return handler(config)
    except VALIDATION_ERRORS as e:
        logger.error(str(e))
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        logger.error(f"Command failed: {e}", exc_info=True)
        print(f"✗ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
