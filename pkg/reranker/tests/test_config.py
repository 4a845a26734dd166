import os
import tempfile

from django.test import SimpleTestCase, override_settings

from reranker.config import EdgeRecConfig, log_boundaries
from reranker.exceptions import ConfigError


@override_settings(EDGEREC_CONFIG_FILE='')
class ConfigLoadTests(SimpleTestCase):
    def write(self, text):
        handle = tempfile.NamedTemporaryFile('w', suffix='.env', delete=False)
        handle.write(text)
        handle.close()
        self.addCleanup(os.unlink, handle.name)
        return handle.name

    def test_defaults(self):
        config = EdgeRecConfig.load(environ={})
        self.assertEqual(config.max_ie_length, 64)
        self.assertEqual(config.page_size, 50)
        self.assertEqual(config.mlp_hidden, (32, 32))

    def test_file_then_environment(self):
        path = self.write('MAX_IE_LENGTH=12\nMLP_HIDDEN=8,4\nLEARNING_RATE=0.01\n')
        config = EdgeRecConfig.load(path, environ={'EDGEREC_MAX_IE_LENGTH': '20', 'HOME': '/root'})
        self.assertEqual(config.max_ie_length, 20)
        self.assertEqual(config.mlp_hidden, (8, 4))
        self.assertEqual(config.learning_rate, 0.01)

    def test_settings_supply_the_file(self):
        path = self.write('K_EXPOSE=4\n')
        with self.settings(EDGEREC_CONFIG_FILE=path):
            self.assertEqual(EdgeRecConfig.load(environ={}).k_expose, 4)

    def test_unknown_key(self):
        path = self.write('MAX_IE_LENGHT=12\n')
        with self.assertRaises(ConfigError):
            EdgeRecConfig.load(path, environ={})

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            EdgeRecConfig.load('/nonexistent/edgerec.env', environ={})

    def test_non_positive_and_malformed_values(self):
        for values in ({'PAGE_SIZE': '0'}, {'GRU_HIDDEN': '-3'}, {'BATCH_SIZE': 'many'},
                       {'MLP_INPUT': 'both'}, {'PAGE_SIZE': '200'}):
            with self.assertRaises(ConfigError, msg=str(values)):
                EdgeRecConfig.from_mapping(values)

    def test_explicit_boundaries(self):
        config = EdgeRecConfig.from_mapping({'BOUNDARIES_EXPOSURE_COUNT': '1,2,5'})
        self.assertEqual(config.feature_config().boundaries['exposure_count'], (1.0, 2.0, 5.0))
        with self.assertRaises(ConfigError):
            EdgeRecConfig.from_mapping({'BOUNDARIES_EXPOSURE_COUNT': '5,2'})

    def test_generated_boundaries_ascend(self):
        bounds = log_boundaries(100.0, 60000.0, 8)
        self.assertEqual(len(bounds), 8)
        self.assertTrue(all(a < b for a, b in zip(bounds, bounds[1:])))


class ConfigHashTests(SimpleTestCase):
    def test_hash_is_stable_and_sensitive(self):
        self.assertEqual(EdgeRecConfig().config_hash(), EdgeRecConfig().config_hash())
        self.assertEqual(len(EdgeRecConfig().config_hash()), 16)
        self.assertNotEqual(EdgeRecConfig().config_hash(), EdgeRecConfig(seed=8).config_hash())

    def test_rendering_is_sorted_key_value_text(self):
        lines = EdgeRecConfig().render().splitlines()
        self.assertEqual(lines, sorted(lines))
        self.assertIn('MAX_IE_LENGTH=64', lines)
        self.assertIn('MLP_HIDDEN=32,32', lines)

    def test_production_profile(self):
        config = EdgeRecConfig.production_profile()
        self.assertEqual(config.batch_size, 512)
        self.assertEqual(config.gru_layers, 3)
        self.assertEqual(config.mlp_hidden, (32, 32))
