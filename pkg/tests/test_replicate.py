# tests/test_replicate.py

import os
import sys
import unittest
from dataclasses import replace

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from tasks.estimate import OptimizerConfig
from tasks.replicate import ReplicateOutcome, run_replication, summarize_replicates
from tasks.simulate import SimDesign
from utils.exceptions import SchemaError
from tests.builders import slow

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def scenario(name, **changes) -> SimDesign:
    design = SimDesign.load(os.path.join(ROOT, 'config', 'scenarios', f"{name}.yaml"))
    return replace(design, **changes) if changes else design


class TestSummary(unittest.TestCase):
    def setUp(self):
        self.design = scenario('I1a', n_subjects=20)
        self.truth = self.design.theta.theta

    def outcome(self, index, shift, se=0.1, converged=True, iterations=12):
        theta = self.truth + shift
        theta[self.design.theta.layout.fixed_mask] = self.truth[self.design.theta.layout.fixed_mask]
        return ReplicateOutcome(index=index, seed=self.design.seed + index, theta=theta,
                                se=np.full(self.truth.size, se), loglik=-100.0, converged=converged,
                                iterations=iterations, n_visits=80, n_diagnosed=6)

    def test_bias_sd_and_coverage(self):
        outcomes = [self.outcome(0, 0.05), self.outcome(1, -0.05), self.outcome(2, 0.3),
                    self.outcome(3, 0.0, converged=False), self.outcome(4, 0.1, iterations=45)]
        report = summarize_replicates(self.design, outcomes)
        table = report.table
        self.assertEqual(len(table), 25)
        self.assertEqual(list(table.columns), ['parameter', 'theta', 'mean_est', 'bias_pct', 'mean_SE', 'emp_SD',
                                               'CR95'])
        self.assertEqual(report.n_replicates, 5)
        self.assertEqual(report.n_converged, 4)
        self.assertEqual(report.n_within_reference, 3)
        row = table.set_index('parameter').loc['diag.gamma[function]']
        self.assertAlmostEqual(row['theta'], 0.4)
        self.assertAlmostEqual(row['mean_est'], 0.4 + 0.1, places=10)
        self.assertAlmostEqual(row['bias_pct'], 25.0, places=8)
        self.assertAlmostEqual(row['mean_SE'], 0.1)
        self.assertAlmostEqual(row['emp_SD'], float(np.std([0.05, -0.05, 0.3, 0.1], ddof=1)), places=10)
        # the 0.3 shift falls outside 1.96 * 0.1
        self.assertAlmostEqual(row['CR95'], 75.0)
        self.assertFalse(report.degraded)

    def test_degraded_report(self):
        outcomes = [self.outcome(i, 0.0, converged=i < 3) for i in range(5)]
        report = summarize_replicates(self.design, outcomes)
        self.assertTrue(report.degraded)
        text = report.summary_text()
        self.assertIn('degraded: yes', text)
        self.assertIn(f"replicate 3 (seed {self.design.seed + 3}) not converged", text)

    def test_no_converged_replicate(self):
        report = summarize_replicates(self.design, [self.outcome(0, 0.0, converged=False)])
        self.assertEqual(report.n_converged, 0)
        self.assertTrue(report.table['mean_est'].isna().all())
        self.assertTrue(report.degraded)

    def test_undefined_standard_errors_are_skipped(self):
        outcomes = [self.outcome(0, 0.05), self.outcome(1, -0.05, se=np.nan)]
        row = summarize_replicates(self.design, outcomes).table.iloc[0]
        self.assertAlmostEqual(row['mean_SE'], 0.1)
        self.assertAlmostEqual(row['CR95'], 100.0)


class TestRunReplication(unittest.TestCase):
    def test_replicates_use_consecutive_seeds(self):
        design = scenario('I1a', n_subjects=15)
        cfg = OptimizerConfig(max_iter=0)
        report = run_replication(design, 3, opt_cfg=cfg)
        self.assertEqual([o.seed for o in report.outcomes], [design.seed, design.seed + 1, design.seed + 2])
        self.assertEqual(report.n_converged, 0)
        self.assertTrue(all(np.isfinite(o.loglik) for o in report.outcomes))
        parallel = run_replication(design, 3, opt_cfg=cfg, threads=2)
        self.assertEqual([o.loglik for o in parallel.outcomes], [o.loglik for o in report.outcomes])

    def test_fit_spec_must_share_layout(self):
        design = scenario('I1a', n_subjects=15)
        with self.assertRaises(SchemaError):
            run_replication(design, 1, fit_spec=scenario('I4').spec)
        with self.assertRaises(ValueError):
            run_replication(design, 0)

    @slow
    def test_smoke_replication(self):
        design = scenario('I1a', n_subjects=200)
        report = run_replication(design, 10, threads=os.cpu_count() or 1)
        self.assertGreaterEqual(report.n_converged, 8)
        table = report.table[np.abs(report.table['theta']) >= 0.3]
        self.assertTrue(np.all(np.abs(table['bias_pct']) < 15.0))

    @slow
    def test_discretized_event_contributions(self):
        report = run_replication(scenario('I4'), 10, threads=os.cpu_count() or 1)
        self.assertGreaterEqual(report.n_converged, 8)
        rows = report.table[report.table['parameter'].str.startswith('death.delta')]
        self.assertEqual(len(rows), 2)
        self.assertTrue(np.all(np.abs(rows['bias_pct']) < 10.0))

    @slow
    def test_entry_correction_removes_threshold_bias(self):
        design = scenario('delayed_entry')
        threads = os.cpu_count() or 1
        corrected = run_replication(design, 20, threads=threads)
        uncorrected = run_replication(design, 20, threads=threads, fit_spec=replace(design.spec, delayed_entry=False))
        label = 'diag.zeta[intercept]'
        bias = corrected.table.set_index('parameter').loc[label, 'bias_pct']
        naive = uncorrected.table.set_index('parameter').loc[label, 'bias_pct']
        self.assertLess(abs(bias), abs(naive))
        self.assertLess(abs(bias), 10.0)


if __name__ == '__main__':
    unittest.main()
