# main.py
import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from tasks.estimate import OptimizerConfig, fit_model
from tasks.predict import PredictRequest, predict_trajectory
from tasks.replicate import run_replication
from tasks.simulate import DatasetGenerator, SimDesign
from utils.exceptions import (EXIT_INPUT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK, InputError, JointModelError,
                              SchemaError, exit_code_for)
from utils.file_handler import (load_fitted_model, load_subjects, observed_time_range, read_csv,
                                save_fitted_model, write_csv, write_dataset, write_text)
from utils.load_config import load_config, resolve_threads
from utils.logging_setup import setup_logging
from utils.model_spec import ModelSpec
from utils.mvn import ESTIMATION_DEFAULTS, CdfConfig, GaussianCdfQuery, mvn_cdf
from utils.parameters import ParameterLayout, ParameterVector
from utils.subject import marker_values

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='jointlpm',
                                     description='Joint latent-process threshold models for markers and endpoints.')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default='config/config.yaml', help='Configuration file')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--seed', type=int, help='Master seed recorded in every output')
    common.add_argument('--threads', type=int, help='Worker processes (overrides JOINTLPM_THREADS)')
    common.add_argument('--verbose', action='store_true', help='Debug-level logging')
    optim = argparse.ArgumentParser(add_help=False)
    optim.add_argument('--max-iter', type=int, help='Maximum Marquardt iterations')
    optim.add_argument('--tol-rdm', type=float, help='Relative distance to maximum tolerance')
    sub = parser.add_subparsers(dest='command', required=True)

    fit = sub.add_parser('fit', parents=[common, optim], help='Fit a model to data files')
    fit.add_argument('--spec', required=True, help='ModelSpec YAML (or scenario file)')
    fit.add_argument('--markers', required=True, help='Markers CSV: id,time,domain,marker,value')
    fit.add_argument('--diag', help='Diagnosis CSV: id,time,status[,process]')
    fit.add_argument('--events', help='Event CSV: id,entry,time,status')
    fit.add_argument('--covariates', help='Covariates CSV: id plus one column per covariate')
    fit.add_argument('--init', help='Starting values CSV with label and estimate (or value) columns')

    simulate = sub.add_parser('simulate', parents=[common], help='Generate a dataset from a scenario')
    simulate.add_argument('--scenario', help='Scenario YAML (default from the configuration)')
    simulate.add_argument('--n-subjects', type=int, help='Override the number of subjects')

    replicate = sub.add_parser('replicate', parents=[common, optim], help='Simulation study over replicates')
    replicate.add_argument('--scenario', help='Scenario YAML (default from the configuration)')
    replicate.add_argument('--replicates', type=int, default=10, help='Number of replicates')
    replicate.add_argument('--n-subjects', type=int, help='Override the number of subjects')
    replicate.add_argument('--uncorrected', action='store_true',
                           help='Fit without the delayed-entry correction')

    predict = sub.add_parser('predict', parents=[common], help='Predicted degradation trajectory')
    predict.add_argument('--fitted', required=True, help='fitted_model.json written by fit')
    predict.add_argument('--profile', action='append', default=[], help='Covariate value, name=value')
    predict.add_argument('--grid', required=True, help='Ages start:stop:step in years')
    predict.add_argument('--draws', type=int, default=2000, help='Monte Carlo parameter draws')
    predict.add_argument('--level', type=float, default=0.95, help='Band level')
    predict.add_argument('--process', help='Endpoint process (default: the first one)')

    mvncdf = sub.add_parser('mvncdf', parents=[common], help='Evaluate a Gaussian CDF from a YAML query')
    mvncdf.add_argument('--input', required=True, help='YAML with upper, mean and cov')
    return parser


def cdf_settings(config: Dict, seed: Optional[int], estimation: bool) -> CdfConfig:
    values = dict(config.get('cdf') or {})
    if estimation:
        for key in ESTIMATION_DEFAULTS:
            values.pop(key, None)
        values.update((config.get('likelihood') or {}).get('cdf') or {})
    if seed is not None:
        values['rng_seed'] = seed
    return CdfConfig.from_dict(values, estimation=estimation)


def optimizer_settings(config: Dict, args) -> OptimizerConfig:
    values = dict(config.get('optimizer') or {})
    if getattr(args, 'max_iter', None) is not None:
        values['max_iter'] = args.max_iter
    if getattr(args, 'tol_rdm', None) is not None:
        values['rdm_tol'] = args.tol_rdm
    return OptimizerConfig.from_dict(values)


def output_dir(args, config: Dict, default: str) -> str:
    path = args.out or os.path.join(config['processing'].get('output_dir') or 'output', default)
    os.makedirs(path, exist_ok=True)
    return path


def load_design(args, config: Dict) -> SimDesign:
    path = args.scenario or (config.get('simulation') or {}).get('scenario')
    if not path:
        raise SchemaError("No scenario given (--scenario or simulation.scenario in the configuration)")
    design = SimDesign.load(path)
    if args.n_subjects is not None:
        design = replace(design, n_subjects=args.n_subjects)
    if args.seed is not None:
        design = design.with_seed(args.seed)
    return design


def read_init(path: str, layout: ParameterLayout) -> ParameterVector:
    frame = read_csv(path, ['label'])
    column = 'estimate' if 'estimate' in frame.columns else 'value'
    if column not in frame.columns:
        raise SchemaError(f"{path}: missing column 'estimate'")
    values = dict(zip(frame['label'], pd.to_numeric(frame[column], errors='raise')))
    return ParameterVector.from_labels(layout, values)


def convergence_block(fit, n_subjects: int, seed: Optional[int]) -> str:
    lines = [
        f"converged: {'yes' if fit.converged else 'no'}",
        f"iterations: {fit.iterations}",
        f"loglik: {fit.loglik:.6f}",
        f"rdm: {fit.rdm:.6g}",
        f"free_parameters: {fit.n_free}",
        f"subjects: {n_subjects}",
        f"aic: {fit.aic:.4f}",
        f"hessian_condition: {fit.condition_number:.3e}",
        f"likelihood_diagnostics: {fit.diagnostics.summary()}",
        f"seed: {seed}",
    ]
    if fit.message:
        lines.append(f"message: {fit.message}")
    return '\n'.join(lines) + '\n'


def cmd_fit(args, config: Dict) -> int:
    spec = ModelSpec.load(args.spec)
    subjects = load_subjects(args.markers, args.diag, args.events, args.covariates, spec=spec)
    if not subjects:
        raise SchemaError(f"{args.markers}: no subject")
    spec = spec.resolve_links(marker_values(subjects))
    theta0 = read_init(args.init, ParameterLayout(spec)) if args.init else None
    cdf_cfg = cdf_settings(config, args.seed, estimation=True)
    opt_cfg = optimizer_settings(config, args)
    threads = resolve_threads(args.threads, config)
    out = output_dir(args, config, 'fit')

    fit = fit_model(spec, subjects, theta0, opt_cfg, cdf_cfg, threads)
    table = fit.estimates_table()
    write_csv(table, os.path.join(out, 'estimates.csv'), cdf_cfg.rng_seed)
    write_text(os.path.join(out, 'convergence.txt'), convergence_block(fit, len(subjects), cdf_cfg.rng_seed))
    save_fitted_model(os.path.join(out, 'fitted_model.json'), spec, fit, seed=cdf_cfg.rng_seed,
                      time_support=observed_time_range(subjects), n_subjects=len(subjects))
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args, config: Dict) -> int:
    design = load_design(args, config)
    out = output_dir(args, config, 'simulate')
    generator = DatasetGenerator(design)
    subjects = generator.generate()
    write_dataset(subjects, out, design.seed)
    design.spec.save(os.path.join(out, 'model_spec.yaml'))
    theta = pd.DataFrame({'label': design.theta.layout.labels, 'value': design.theta.theta})
    write_csv(theta, os.path.join(out, 'generating_theta.csv'), design.seed)
    print(generator.summary.describe())
    return EXIT_OK


def cmd_replicate(args, config: Dict) -> int:
    design = load_design(args, config)
    fit_spec = None
    if args.uncorrected:
        fit_spec = replace(design.spec, delayed_entry=False)
    cdf_cfg = cdf_settings(config, design.seed, estimation=True)
    opt_cfg = optimizer_settings(config, args)
    threads = resolve_threads(args.threads, config)
    out = output_dir(args, config, 'replicate')

    report = run_replication(design, args.replicates, opt_cfg, cdf_cfg, threads, fit_spec=fit_spec)
    write_csv(report.table, os.path.join(out, 'replication.csv'), design.seed)
    write_text(os.path.join(out, 'replication_summary.txt'), report.summary_text())
    print(report.summary_text(), end='')
    return EXIT_NOT_CONVERGED if report.degraded else EXIT_OK


def parse_profile(items: List[str]) -> Dict[str, float]:
    profile = {}
    for item in items:
        for part in item.split(','):
            name, sep, value = part.partition('=')
            if not sep:
                raise SchemaError(f"Profile entry '{part}' is not name=value")
            try:
                profile[name.strip()] = float(value)
            except ValueError:
                raise SchemaError(f"Profile value of '{name.strip()}' is not a number: '{value}'")
    return profile


def parse_grid(text: str) -> np.ndarray:
    try:
        start, stop, step = (float(v) for v in text.split(':'))
    except ValueError:
        raise SchemaError(f"Grid '{text}' is not start:stop:step")
    if not step > 0 or stop < start:
        raise SchemaError(f"Grid '{text}' needs a positive step and stop >= start")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


def cmd_predict(args, config: Dict) -> int:
    fitted = load_fitted_model(args.fitted)
    if not fitted.converged:
        logger.warning(f"'{args.fitted}' holds a non-converged fit")
    seed = args.seed if args.seed is not None else (fitted.seed if fitted.seed is not None else 20240601)
    req = PredictRequest(spec=fitted.spec, theta=fitted.theta, covariance=fitted.covariance,
                         profile=parse_profile(args.profile), time_grid=parse_grid(args.grid),
                         mc_draws=args.draws, band_level=args.level, seed=seed, process=args.process,
                         time_support=fitted.time_support)
    out = output_dir(args, config, 'predict')
    write_csv(predict_trajectory(req), os.path.join(out, 'prediction.csv'), seed)
    return EXIT_OK


def cmd_mvncdf(args, config: Dict) -> int:
    try:
        with open(args.input, 'r', encoding='utf-8') as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError:
        raise SchemaError(f"Query file '{args.input}' not found")
    except yaml.YAMLError as ye:
        raise SchemaError(f"YAML parsing error in '{args.input}': {ye}")
    if not isinstance(doc, dict) or 'upper' not in doc or 'cov' not in doc:
        raise SchemaError(f"{args.input}: a query needs 'upper' and 'cov'")
    upper = np.atleast_1d(np.asarray(doc['upper'], dtype=float))
    query = GaussianCdfQuery(upper=upper, mean=doc.get('mean', np.zeros(upper.size)), cov=doc['cov'])
    value, err = mvn_cdf(query, cdf_settings(config, args.seed, estimation=False))
    print(f"{value:.10g} {err:.3g}")
    return EXIT_OK


COMMANDS = {
    'fit': cmd_fit,
    'simulate': cmd_simulate,
    'replicate': cmd_replicate,
    'predict': cmd_predict,
    'mvncdf': cmd_mvncdf,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    # Load configuration
    try:
        config = load_config(args.config)
    except (OSError, ValueError, yaml.YAMLError) as e:
        print(f"Failed to load configuration: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR

    setup_logging(config['processing'].get('log_file'), 'DEBUG' if args.verbose else 'INFO')

    try:
        return COMMANDS[args.command](args, config)
    except InputError as e:
        logger.error(f"Input error: {e}")
        return exit_code_for(e)
    except JointModelError as e:
        logger.error(f"Numerical error: {e}")
        return exit_code_for(e)
    except (ValueError, pd.errors.ParserError) as e:
        logger.error(f"Input error: {e}")
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
