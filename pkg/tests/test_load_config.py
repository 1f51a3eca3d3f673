# tests/test_load_config.py

import logging
import os
import sys
import tempfile
import unittest
from unittest import mock

import yaml

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from utils.load_config import THREADS_ENV_VAR, load_config, resolve_threads, substitute_env_vars
from utils.logging_setup import setup_logging

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


class TestLoadConfig(unittest.TestCase):
    def test_repository_config(self):
        with mock.patch.dict(os.environ, {THREADS_ENV_VAR: '3'}):
            config = load_config(os.path.join(ROOT, 'config', 'config.yaml'), dotenv_path='no/such/.env')
        self.assertEqual(config['processing']['threads'], '3')
        self.assertFalse(config['likelihood']['cdf']['adaptive'])
        self.assertGreaterEqual(config['cdf']['max_points'], 1000)

    def test_missing_section(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'config.yaml')
            with open(path, 'w', encoding='utf-8') as f:
                yaml.safe_dump({'cdf': {}, 'optimizer': {}}, f)
            with self.assertRaises(ValueError):
                load_config(path, dotenv_path=os.path.join(tmp, '.env'))
            with self.assertRaises(FileNotFoundError):
                load_config(os.path.join(tmp, 'absent.yaml'))

    def test_dotenv_file_is_read(self):
        with tempfile.TemporaryDirectory() as tmp:
            env = os.path.join(tmp, '.env')
            with open(env, 'w', encoding='utf-8') as f:
                f.write('JOINTLPM_TEST_OUTPUT=/tmp/jointlpm-out\n')
            path = os.path.join(tmp, 'config.yaml')
            with open(path, 'w', encoding='utf-8') as f:
                yaml.safe_dump({'cdf': {}, 'optimizer': {}, 'likelihood': {},
                                'processing': {'output_dir': '${JOINTLPM_TEST_OUTPUT}'}}, f)
            with mock.patch.dict(os.environ, {}, clear=False):
                config = load_config(path, dotenv_path=env)
                self.assertEqual(config['processing']['output_dir'], '/tmp/jointlpm-out')
                os.environ.pop('JOINTLPM_TEST_OUTPUT', None)


class TestSubstitution(unittest.TestCase):
    def test_nested_values(self):
        with mock.patch.dict(os.environ, {'A_VAR': 'x', 'B_VAR': '2'}):
            doc = substitute_env_vars({'a': '${A_VAR}/${B_VAR}', 'b': ['${B_VAR}', 5], 'c': {'d': '${UNSET_VAR_42}'}})
        self.assertEqual(doc, {'a': 'x/2', 'b': ['2', 5], 'c': {'d': ''}})


class TestResolveThreads(unittest.TestCase):
    def test_precedence(self):
        config = {'processing': {'threads': '5'}}
        with mock.patch.dict(os.environ, {THREADS_ENV_VAR: '3'}):
            self.assertEqual(resolve_threads(2, config), 2)
            self.assertEqual(resolve_threads(None, config), 3)
        with mock.patch.dict(os.environ, {THREADS_ENV_VAR: ''}):
            self.assertEqual(resolve_threads(None, config), 5)
            self.assertEqual(resolve_threads(None, {'processing': {'threads': ''}}), os.cpu_count() or 1)

    def test_invalid_values_are_skipped(self):
        with mock.patch.dict(os.environ, {THREADS_ENV_VAR: 'many'}):
            self.assertEqual(resolve_threads(0, {'processing': {'threads': 4}}), 4)


class TestLoggingSetup(unittest.TestCase):
    def tearDown(self):
        logging.getLogger().handlers.clear()

    def test_file_keeps_debug_records(self):
        with tempfile.TemporaryDirectory() as tmp:
            log_file = os.path.join(tmp, 'logs', 'jointlpm.log')
            root = setup_logging(log_file, 'INFO')
            self.assertEqual(root.level, logging.DEBUG)
            console = [h for h in root.handlers if not isinstance(h, logging.FileHandler)]
            self.assertEqual([h.level for h in console], [logging.INFO])
            logging.getLogger('tasks.estimate').debug('iter 1')
            for handler in root.handlers:
                handler.close()
            root.handlers.clear()
            with open(log_file, 'r', encoding='utf-8') as f:
                self.assertIn('iter 1', f.read())

    def test_console_only(self):
        root = setup_logging('', 'bogus')
        self.assertEqual(len(root.handlers), 1)
        self.assertEqual(root.level, logging.INFO)


if __name__ == '__main__':
    unittest.main()
