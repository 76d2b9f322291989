import unittest

from klora import __version__
from klora.reports import (
    REPORT_MODELS,
    RunManifest,
    SequentialRunReport,
    report_schemas,
    strip_timing,
)


class ManifestTestCase(unittest.TestCase):

    def test_create(self):
        manifest = RunManifest.create("verify", 3, {"trials": 5})
        self.assertEqual(manifest.version, __version__)
        self.assertEqual(manifest.config, {"trials": 5})
        self.assertTrue(manifest.timestamp)


class StripTimingTestCase(unittest.TestCase):

    def test_nested(self):
        report = {
            "manifest": {"seed": 1, "timestamp": "now"},
            "results": [{"kind": "LORA", "forward_throughput": 10.0, "r": 8}],
        }
        self.assertEqual(
            strip_timing(report),
            {"manifest": {"seed": 1}, "results": [{"kind": "LORA", "r": 8}]},
        )


class SchemaTestCase(unittest.TestCase):

    def test_every_report(self):
        schemas = report_schemas()
        self.assertEqual(sorted(schemas), sorted(m.__name__ for m in REPORT_MODELS))
        self.assertIn("passed", schemas["VerifyReport"]["properties"])

    def test_sequential_round_trip(self):
        report = SequentialRunReport.from_accuracies(0.9, 0.8, 0.85, kind="LORA")
        again = SequentialRunReport.model_validate_json(report.model_dump_json())
        self.assertEqual(again.delta_T1, report.delta_T1)
