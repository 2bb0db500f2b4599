import argparse
import os
import sys
from collections.abc import Sequence
from typing import Any

import pandas as pd
import sentry_sdk
from pydantic import ValidationError

from stablab.core import HypothesisError
from stablab.engine import AcceptanceRateError
from stablab.experiments import run_experiment
from stablab.schemas import ConfigError
from stablab.schemas import CSV_COLUMNS
from stablab.schemas import ExperimentConfig
from stablab.schemas import ExperimentName
from stablab.schemas import ResultRow
from stablab.spectral import load_dataset_csv
from stablab.spectral import rayleigh_certificate
from stablab.theory import BoundKind
from stablab.theory import evaluate_bound

SEED_ENV = 'STABLAB_SEED'

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2


def _parse_pairs(lines: Sequence[str], *, source: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f'{source}:{lineno}: expected "key = value", got {raw!r}')
        if key in values:
            raise ConfigError(f'{source}:{lineno}: duplicate key {key!r}')
        values[key] = value
    return values


def _validation_message(exc: ValidationError) -> str:
    messages = []
    for error in exc.errors():
        loc = '.'.join(str(part) for part in error['loc'])
        if error['type'] == 'extra_forbidden':
            messages.append(f'{loc}: unknown key')
        elif error['type'] == 'missing':
            messages.append(f'missing required key(s): {loc}')
        else:
            msg = error['msg'].removeprefix('Value error, ')
            messages.append(f'{loc}: {msg}' if loc else msg)
    return '; '.join(messages)


def _validate(values: dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(_validation_message(e)) from e


def parse_config(text: str, *, source: str = '<config>') -> ExperimentConfig:
    """Parse the flat ``key = value`` format; ``#`` starts a comment.

    :raises ConfigError: naming the offending key and, for a violated
        precondition, the hypothesis
    """
    values = _parse_pairs(text.splitlines(), source=source)
    if 'experiment' not in values:
        raise ConfigError(
            'missing required key(s): experiment (one of '
            f"{', '.join(ExperimentName)})",
        )
    return _validate(values)


def _render_value(value: object) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config: ExperimentConfig) -> str:
    """the inverse of :func:`parse_config`"""
    return ''.join(
        f'{key} = {_render_value(value)}\n'
        for key, value in config.model_dump().items()
        if value is not None
    )


def apply_seed_override(config: ExperimentConfig) -> ExperimentConfig:
    seed = os.environ.get(SEED_ENV)
    if seed is None:
        return config
    return _validate({**config.model_dump(exclude_none=True), 'seed': seed})


def write_results(rows: Sequence[ResultRow], path: str) -> None:
    df = pd.DataFrame([r.model_dump() for r in rows], columns=list(CSV_COLUMNS))
    df = df.astype({'n': 'Int64', 'T': 'Int64'})
    df.to_csv(path, index=False)


def _run(config: ExperimentConfig, output: str | None) -> int:
    try:
        rows = run_experiment(config)
    except HypothesisError as e:
        print(f'error: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except AcceptanceRateError as e:
        print(f'error: {e}', file=sys.stderr)
        return EXIT_FAIL
    for row in rows:
        print(row.summary())
    write_results(rows, output or config.output)
    return EXIT_PASS if all(r.verdict == 'pass' for r in rows) else EXIT_FAIL


def _load(filename: str, experiment: ExperimentName | None = None) -> ExperimentConfig:
    try:
        with open(filename, encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f'cannot read {filename}: {e}') from e
    if experiment is None:
        config = parse_config(text, source=filename)
    else:
        values = _parse_pairs(text.splitlines(), source=filename)
        config = _validate({**values, 'experiment': experiment})
    return apply_seed_override(config)


def _parse_params(tokens: Sequence[str]) -> dict[str, float]:
    params = {}
    for token in tokens:
        key, sep, value = token.partition('=')
        if not sep:
            raise ConfigError(f'expected symbol=value, got {token!r}')
        try:
            params[key.strip()] = float(value)
        except ValueError:
            raise ConfigError(f'{key}: not a number: {value!r}') from None
    return params


class Namespace(argparse.Namespace):
    command: str
    filename: str
    output: str | None
    kind: str
    params: list[str]
    divergence: bool
    mu: float


def main(argv: Sequence[str] | None = None) -> int:
    sentry_sdk.init(
        dsn=os.environ.get('SENTRY_DSN'),
        traces_sample_rate=float(os.environ.get('SENTRY_TRACES_SAMPLE_RATE', '0.0')),
    )
    parser = argparse.ArgumentParser(
        prog='stablab',
        description='stability experiments for stochastic gradient descent',
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    run_parser = subparsers.add_parser('run', help='run an experiment config')
    run_parser.add_argument('filename')
    run_parser.add_argument('-o', '--output', help='override the CSV output path')

    bounds_parser = subparsers.add_parser('bounds', help='evaluate a bound')
    bounds_parser.add_argument('kind', choices=[str(k) for k in BoundKind])
    bounds_parser.add_argument('params', nargs='*', help='symbol=value pairs')
    bounds_parser.add_argument('--divergence', action='store_true')

    oracle_parser = subparsers.add_parser(
        'oracle',
        help='exhaustive enumeration against the exact recursion',
    )
    oracle_parser.add_argument('filename')
    oracle_parser.add_argument('-o', '--output', help='override the CSV output path')

    rayleigh_parser = subparsers.add_parser(
        'rayleigh',
        help='Rayleigh floor of a delimited dataset',
    )
    rayleigh_parser.add_argument('filename')
    rayleigh_parser.add_argument('--mu', type=float, default=0.0)

    args = parser.parse_args(argv, namespace=Namespace())

    try:
        match args.command:
            case 'run':
                return _run(_load(args.filename), args.output)
            case 'oracle':
                config = _load(args.filename, ExperimentName.oracle_crosscheck)
                return _run(config, args.output)
            case 'bounds':
                report = evaluate_bound(
                    args.kind,
                    _parse_params(args.params),
                    divergence=args.divergence,
                )
                print(f'{report.kind} {report.side} {report.form} {report.value!r}')
                return EXIT_PASS
            case 'rayleigh':
                certificate = rayleigh_certificate(
                    load_dataset_csv(args.filename),
                    args.mu,
                )
                print(
                    f'xi_S={certificate.xi!r} mu={certificate.mu!r} '
                    f'inverse={certificate.estimate!r}',
                )
                return EXIT_PASS
            case _:
                raise NotImplementedError(args.command)
    except (OSError, ValueError) as e:
        print(f'error: {e}', file=sys.stderr)
        return EXIT_CONFIG


if __name__ == '__main__':
    raise SystemExit(main())
