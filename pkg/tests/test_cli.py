# tests/test_cli.py

import io
import os
import shutil
import sys
import tempfile
import unittest
from contextlib import redirect_stdout

import numpy as np
import pandas as pd
import yaml

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from main import cdf_settings, main, parse_grid, parse_profile
from utils.exceptions import EXIT_INPUT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK, SchemaError
from utils.file_handler import FORMAT_TAG, load_fitted_model, read_header_seed
from utils.mvn import CdfConfig

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCENARIO = os.path.join(ROOT, 'config', 'scenarios', 'I1a.yaml')


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        with open(os.path.join(ROOT, 'config', 'config.yaml'), 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f)
        config['processing']['log_file'] = os.path.join(self.tmp, 'logs', 'jointlpm.log')
        config['processing']['threads'] = 1
        config['processing']['output_dir'] = os.path.join(self.tmp, 'output')
        self.config = os.path.join(self.tmp, 'config.yaml')
        with open(self.config, 'w', encoding='utf-8') as f:
            yaml.safe_dump(config, f)

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def run_cli(self, *argv):
        buffer = io.StringIO()
        with redirect_stdout(buffer):
            code = main(list(argv[:1]) + ['--config', self.config] + list(argv[1:]))
        return code, buffer.getvalue()

    def path(self, *parts):
        return os.path.join(self.tmp, *parts)


class TestMvnCdfCommand(CliTestCase):
    def test_identity_orthant(self):
        code, output = self.run_cli('mvncdf', '--input', os.path.join(ROOT, 'data', 'examples',
                                                                     'mvncdf_identity2.yaml'))
        self.assertEqual(code, EXIT_OK)
        value, err = output.strip().splitlines()[-1].split()
        self.assertAlmostEqual(float(value), 0.25, places=10)
        self.assertLess(float(err), 1e-6)

    def test_bad_query(self):
        query = self.path('bad.yaml')
        with open(query, 'w', encoding='utf-8') as f:
            yaml.safe_dump({'upper': [0.0, 0.0], 'cov': [[1.0, 0.0]]}, f)
        self.assertEqual(self.run_cli('mvncdf', '--input', query)[0], EXIT_INPUT_ERROR)
        self.assertEqual(self.run_cli('mvncdf', '--input', self.path('missing.yaml'))[0], EXIT_INPUT_ERROR)


class TestSimulateFitPredict(CliTestCase):
    def simulate(self, n_subjects=25):
        out = self.path('sim')
        code, output = self.run_cli('simulate', '--scenario', SCENARIO, '--n-subjects', str(n_subjects),
                                    '--seed', '11', '--out', out)
        self.assertEqual(code, EXIT_OK)
        return out

    def test_simulate_writes_versioned_tables(self):
        out = self.simulate()
        for name in ('markers.csv', 'diag.csv', 'covariates.csv', 'model_spec.yaml', 'generating_theta.csv'):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)
        with open(os.path.join(out, 'markers.csv'), 'r', encoding='utf-8') as f:
            self.assertEqual(f.readline().strip(), f"# {FORMAT_TAG} seed=11")
        self.assertEqual(read_header_seed(os.path.join(out, 'diag.csv')), 11)
        markers = pd.read_csv(os.path.join(out, 'markers.csv'), comment='#')
        self.assertEqual(list(markers.columns), ['id', 'time', 'domain', 'marker', 'value'])
        self.assertEqual(markers['id'].nunique(), 25)
        self.assertFalse(os.path.exists(os.path.join(out, 'events.csv')))

    def test_fit_without_iterations_then_predict(self):
        sim = self.simulate()
        out = self.path('fit')
        code, _ = self.run_cli('fit', '--spec', os.path.join(sim, 'model_spec.yaml'),
                               '--markers', os.path.join(sim, 'markers.csv'), '--diag', os.path.join(sim, 'diag.csv'),
                               '--covariates', os.path.join(sim, 'covariates.csv'), '--max-iter', '0',
                               '--threads', '1', '--out', out)
        self.assertEqual(code, EXIT_NOT_CONVERGED)
        estimates = pd.read_csv(os.path.join(out, 'estimates.csv'), comment='#')
        self.assertEqual(len(estimates), 29)
        self.assertEqual(int((~estimates['fixed']).sum()), 25)
        with open(os.path.join(out, 'convergence.txt'), 'r', encoding='utf-8') as f:
            text = f.read()
        self.assertIn('converged: no', text)
        self.assertIn('free_parameters: 25', text)
        fitted = load_fitted_model(os.path.join(out, 'fitted_model.json'))
        self.assertFalse(fitted.converged)
        self.assertEqual(fitted.n_subjects, 25)

        lo, hi = fitted.time_support
        grid = f"{np.ceil(lo)}:{np.floor(hi)}:1"
        pred = self.path('pred')
        code, _ = self.run_cli('predict', '--fitted', os.path.join(out, 'fitted_model.json'), '--profile', 'EL=1',
                               '--grid', grid, '--draws', '50', '--out', pred)
        self.assertEqual(code, EXIT_OK)
        frame = pd.read_csv(os.path.join(pred, 'prediction.csv'), comment='#')
        self.assertEqual(list(frame.columns), ['time', 'estimate', 'lower', 'upper'])
        # no covariance without iterations
        self.assertTrue(frame['lower'].isna().all())
        self.assertFalse(frame['estimate'].isna().any())

        code, _ = self.run_cli('predict', '--fitted', os.path.join(out, 'fitted_model.json'), '--profile', 'EL=1',
                               '--grid', f"{lo - 10}:{hi}:1", '--out', self.path('pred2'))
        self.assertEqual(code, EXIT_INPUT_ERROR)

    def test_init_file_is_used(self):
        sim = self.simulate()
        out = self.path('fit')
        code, _ = self.run_cli('fit', '--spec', SCENARIO, '--markers', os.path.join(sim, 'markers.csv'),
                               '--diag', os.path.join(sim, 'diag.csv'), '--covariates',
                               os.path.join(sim, 'covariates.csv'), '--init',
                               os.path.join(sim, 'generating_theta.csv'), '--max-iter', '0', '--out', out)
        self.assertEqual(code, EXIT_NOT_CONVERGED)
        estimates = pd.read_csv(os.path.join(out, 'estimates.csv'), comment='#').set_index('label')
        theta = pd.read_csv(os.path.join(sim, 'generating_theta.csv'), comment='#').set_index('label')
        np.testing.assert_allclose(estimates['estimate'], theta['value'].loc[estimates.index])

    def test_malformed_markers_exit_without_outputs(self):
        sim = self.simulate()
        markers = pd.read_csv(os.path.join(sim, 'markers.csv'), comment='#')
        markers['value'] = markers['value'].astype(object)
        markers.loc[3, 'value'] = 'abc'
        bad = self.path('bad_markers.csv')
        markers.to_csv(bad, index=False)
        out = self.path('fit_bad')
        code, _ = self.run_cli('fit', '--spec', SCENARIO, '--markers', bad, '--diag', os.path.join(sim, 'diag.csv'),
                               '--covariates', os.path.join(sim, 'covariates.csv'), '--out', out)
        self.assertEqual(code, EXIT_INPUT_ERROR)
        self.assertFalse(os.path.exists(out))

    def test_missing_covariates_file(self):
        sim = self.simulate()
        code, _ = self.run_cli('fit', '--spec', SCENARIO, '--markers', os.path.join(sim, 'markers.csv'),
                               '--diag', os.path.join(sim, 'diag.csv'), '--out', self.path('fit'))
        self.assertEqual(code, EXIT_INPUT_ERROR)

    def test_replicate_reports_degraded_run(self):
        out = self.path('rep')
        code, output = self.run_cli('replicate', '--scenario', SCENARIO, '--replicates', '2', '--n-subjects', '10',
                                    '--max-iter', '0', '--threads', '1', '--out', out)
        self.assertEqual(code, EXIT_NOT_CONVERGED)
        self.assertIn('degraded: yes', output)
        table = pd.read_csv(os.path.join(out, 'replication.csv'), comment='#')
        self.assertEqual(len(table), 25)
        self.assertTrue(os.path.exists(os.path.join(out, 'replication_summary.txt')))

    def test_unknown_scenario(self):
        code, _ = self.run_cli('simulate', '--scenario', self.path('nothing.yaml'), '--out', self.path('x'))
        self.assertEqual(code, EXIT_INPUT_ERROR)


class TestArgumentParsing(unittest.TestCase):
    def test_grid(self):
        np.testing.assert_allclose(parse_grid('65:75:2.5'), [65.0, 67.5, 70.0, 72.5, 75.0])
        np.testing.assert_allclose(parse_grid('70:70:1'), [70.0])
        for text in ('65:75', '75:65:1', '65:75:0', 'a:b:c'):
            with self.assertRaises(SchemaError):
                parse_grid(text)

    def test_cdf_settings(self):
        with open(os.path.join(ROOT, 'config', 'config.yaml'), 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f)
        standalone = cdf_settings(config, None, estimation=False)
        self.assertTrue(standalone.adaptive)
        self.assertTrue(standalone.reorder)
        fitting = cdf_settings(config, 5, estimation=True)
        self.assertFalse(fitting.adaptive)
        self.assertFalse(fitting.reorder)
        self.assertEqual((fitting.fixed_points, fitting.rng_seed), (500, 5))
        # stand-alone sampling switches do not leak into estimation
        self.assertEqual(cdf_settings({'cdf': {'adaptive': True}}, None, estimation=True), CdfConfig.estimation())

    def test_profile(self):
        self.assertEqual(parse_profile(['EL=1', 'sex=0,age=2.5']), {'EL': 1.0, 'sex': 0.0, 'age': 2.5})
        with self.assertRaises(SchemaError):
            parse_profile(['EL'])
        with self.assertRaises(SchemaError):
            parse_profile(['EL=high'])


if __name__ == '__main__':
    unittest.main()
