# tasks/replicate.py

"""
Replication harness: generate, fit and summarize many datasets from one design.

Replicate ``i`` is drawn with seed ``design.seed + i`` and fitted from staged
starting values, so the report depends only on the design, the seed and the
number of replicates. Non-converged replicates are excluded from the summary.
"""

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from tasks.estimate import OptimizerConfig, fit_model
from tasks.simulate import DatasetGenerator, SimDesign
from utils.exceptions import JointModelError, SchemaError
from utils.model_spec import ModelSpec
from utils.mvn import CdfConfig
from utils.parameters import ParameterLayout

logger = logging.getLogger(__name__)

DEGRADED_FAILURE_RATE = 0.2
ITERATION_REFERENCE = 30
Z_95 = 1.959963984540054


@dataclass
class ReplicateOutcome:
    index: int
    seed: int
    theta: Optional[np.ndarray] = None
    se: Optional[np.ndarray] = None
    loglik: float = np.nan
    converged: bool = False
    iterations: int = 0
    n_visits: int = 0
    n_diagnosed: int = 0
    n_events: int = 0
    message: str = ''


@dataclass
class ReplicationReport:
    """
    Per-parameter bias, SE and coverage over the converged replicates.
    """
    name: str
    seed: int
    table: pd.DataFrame
    n_replicates: int
    n_converged: int
    n_within_reference: int
    outcomes: List[ReplicateOutcome] = field(default_factory=list)

    @property
    def degraded(self) -> bool:
        return self.n_replicates - self.n_converged > DEGRADED_FAILURE_RATE * self.n_replicates

    def summary_text(self) -> str:
        lines = [
            f"scenario: {self.name}",
            f"seed: {self.seed}",
            f"replicates: {self.n_replicates}",
            f"converged: {self.n_converged}",
            f"converged within {ITERATION_REFERENCE} iterations: {self.n_within_reference}",
            f"degraded: {'yes' if self.degraded else 'no'}",
        ]
        done = [o for o in self.outcomes if o.theta is not None]
        if done:
            lines.append(f"mean visits per dataset: {np.mean([o.n_visits for o in done]):.1f}")
            lines.append(f"mean diagnosed per dataset: {np.mean([o.n_diagnosed for o in done]):.1f}")
            lines.append(f"mean events per dataset: {np.mean([o.n_events for o in done]):.1f}")
        failed = [o for o in self.outcomes if not o.converged]
        for o in failed:
            lines.append(f"replicate {o.index} (seed {o.seed}) not converged: {o.message}")
        return '\n'.join(lines) + '\n'


def run_replicate(design: SimDesign, index: int, opt_cfg: Optional[OptimizerConfig] = None,
                  cdf_cfg: Optional[CdfConfig] = None, fit_spec: Optional[ModelSpec] = None) -> ReplicateOutcome:
    """
    Generate and fit replicate ``index``; failures are recorded, never raised.

    ``fit_spec`` replaces the generating model at the fitting step (for instance the
    same model without the delayed-entry correction); its layout must match.
    """
    seed = design.seed + index
    outcome = ReplicateOutcome(index=index, seed=seed)
    try:
        generator = DatasetGenerator(design.with_seed(seed))
        subjects = generator.generate()
        outcome.n_visits = generator.summary.n_visits
        outcome.n_diagnosed = generator.summary.n_diagnosed
        outcome.n_events = generator.summary.n_events
        fit = fit_model(fit_spec or design.spec, subjects, opt_cfg=opt_cfg, cdf_cfg=cdf_cfg, threads=1)
    except JointModelError as e:
        logger.warning(f"Replicate {index} (seed {seed}) failed: {e}")
        outcome.message = str(e)
        return outcome
    outcome.theta = fit.theta.theta
    outcome.se = fit.se
    outcome.loglik = fit.loglik
    outcome.converged = fit.converged
    outcome.iterations = fit.iterations
    outcome.message = fit.message
    return outcome


def summarize_replicates(design: SimDesign, outcomes: List[ReplicateOutcome]) -> ReplicationReport:
    """
    Aggregate replicate fits into one row per free parameter.

    Relative bias is expressed in % of the generating value (NaN when it is 0);
    coverage counts the replicates whose 95% Wald interval contains it.
    """
    outcomes = sorted(outcomes, key=lambda o: o.index)
    layout = design.theta.layout
    free = ~layout.fixed_mask
    truth = design.theta.theta[free]
    converged = [o for o in outcomes if o.converged and o.theta is not None]
    n = len(converged)
    if n:
        estimates = np.vstack([o.theta[free] for o in converged])
        ses = np.vstack([o.se[free] for o in converged])
        mean_est = estimates.mean(axis=0)
        with np.errstate(invalid='ignore', divide='ignore'):
            bias_pct = np.where(truth != 0, 100.0 * (mean_est - truth) / np.abs(truth), np.nan)
        finite = np.isfinite(ses)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean_se = np.nanmean(np.where(finite, ses, np.nan), axis=0)
        emp_sd = estimates.std(axis=0, ddof=1) if n > 1 else np.full(truth.size, np.nan)
        covered = (np.abs(estimates - truth) <= Z_95 * ses) & finite
        counted = finite.sum(axis=0)
        with np.errstate(invalid='ignore', divide='ignore'):
            coverage = np.where(counted > 0, 100.0 * covered.sum(axis=0) / counted, np.nan)
    else:
        mean_est = bias_pct = mean_se = emp_sd = coverage = np.full(truth.size, np.nan)

    table = pd.DataFrame({
        'parameter': layout.free_labels,
        'theta': truth,
        'mean_est': mean_est,
        'bias_pct': bias_pct,
        'mean_SE': mean_se,
        'emp_SD': emp_sd,
        'CR95': coverage,
    })
    report = ReplicationReport(
        name=design.name, seed=design.seed, table=table, n_replicates=len(outcomes), n_converged=n,
        n_within_reference=sum(1 for o in converged if o.iterations <= ITERATION_REFERENCE),
        outcomes=outcomes,
    )
    if report.degraded:
        logger.warning(f"Only {n} of {len(outcomes)} replicates converged; the report is degraded")
    return report


def run_replication(design: SimDesign, n_replicates: int, opt_cfg: Optional[OptimizerConfig] = None,
                    cdf_cfg: Optional[CdfConfig] = None, threads: int = 1,
                    fit_spec: Optional[ModelSpec] = None) -> ReplicationReport:
    """
    Generate and fit ``n_replicates`` datasets, one replicate per worker process.

    :param design: Generating design; replicate ``i`` uses seed ``design.seed + i``.
    :param n_replicates: Number of datasets.
    :param threads: Worker processes; each replicate's likelihood runs single-threaded.
    :return: ReplicationReport over the converged replicates.
    """
    if n_replicates < 1:
        raise ValueError(f"n_replicates must be positive, got {n_replicates}")
    logger.info(f"Replicating '{design.name}': {n_replicates} datasets of {design.n_subjects} subjects, "
                f"seed {design.seed}, {threads} worker(s)")
    if fit_spec is not None and ParameterLayout(fit_spec).labels != design.theta.layout.labels:
        raise SchemaError("The fitted model does not share the generating parameter layout")
    work = partial(run_replicate, design, opt_cfg=opt_cfg, cdf_cfg=cdf_cfg, fit_spec=fit_spec)
    indices = range(n_replicates)
    if threads > 1 and n_replicates > 1:
        with ProcessPoolExecutor(max_workers=min(threads, n_replicates)) as ex:
            outcomes = list(tqdm(ex.map(work, indices), total=n_replicates, desc="Replicates"))
    else:
        outcomes = [work(i) for i in tqdm(indices, total=n_replicates, desc="Replicates")]
    return summarize_replicates(design, outcomes)
