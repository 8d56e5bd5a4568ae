"""End-to-end checks of the fedoap_cli binary on a tiny configuration."""

import argparse
import csv
import json
import re
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

import jsonschema

ARGS = None
ERROR_LINE = re.compile(r"^error: [A-Za-z]+: [^\n]+\n$")


def run(*argv, check=True):
    proc = subprocess.run([ARGS.cli, *argv], capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"{argv} exited {proc.returncode}: {proc.stderr}")
    return proc


class CliTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.schema = json.loads(Path(ARGS.schema).read_text())

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def out(self, name):
        return str(self.root / name)

    def validate(self, directory):
        report = json.loads((Path(directory) / "report.json").read_text())
        jsonschema.validate(report, self.schema)
        return report

    def train(self, name, *flags):
        run("train", "--config", ARGS.config, "--out", self.out(name), *flags)
        return self.validate(self.out(name))

    def test_train_writes_valid_report_and_metrics(self):
        report = self.train("train")
        self.assertEqual(report["command"], "train")
        with open(Path(self.out("train")) / "metrics.csv") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(list(rows[0].keys()), ["seed", "client_id", "profile", "phase", "step", "metric", "value"])
        self.assertEqual({r["phase"] for r in rows}, {"align", "finetune", "test"})

    def test_same_seed_reports_are_byte_identical(self):
        self.train("same_a", "--seed", "9")
        self.train("same_b", "--seed", "9")
        a = (Path(self.out("same_a")) / "report.json").read_text().replace(self.out("same_a"), "")
        b = (Path(self.out("same_b")) / "report.json").read_text().replace(self.out("same_b"), "")
        self.assertEqual(a, b)
        self.assertEqual((Path(self.out("same_a")) / "metrics.csv").read_bytes(),
                         (Path(self.out("same_b")) / "metrics.csv").read_bytes())

    def test_flags_override_config(self):
        report = self.train("flags", "--strategy", "fedavg-all", "--clients", "2", "--rounds", "1",
                            "--finetune-epochs", "0", "--image-size", "8", "--seeds", "3,4")
        cfg = report["config"]
        self.assertEqual((cfg["strategy"], cfg["clients"], cfg["rounds"]), ("fedavg-all", 2, 1))
        self.assertEqual((cfg["finetune_epochs"], cfg["image_size"], cfg["seeds"]), (0, 8, [3, 4]))
        self.assertEqual(len(report["train"]["runs"]), 2)

    def test_ablation_rows_match_train_runs(self):
        run("ablate", "--config", ARGS.config, "--out", self.out("ablate"))
        report = self.validate(self.out("ablate"))
        rows = {r["name"]: r for r in report["ablation"]["rows"]}
        with open(Path(self.out("ablate")) / "ablation.csv") as f:
            csv_rows = {r["row"]: r for r in csv.DictReader(f)}
        self.assertEqual(set(rows), {"none", "dca", "dca+adapter", "dca+adapter+pbl"})
        self.assertEqual(set(csv_rows), set(rows))
        flags = {"none": ["--no-dca", "--no-adapter", "--no-pbl"], "dca": ["--no-adapter", "--no-pbl"],
                 "dca+adapter": ["--no-pbl"], "dca+adapter+pbl": []}
        for name, extra in flags.items():
            train = self.train("ablate_" + name.replace("+", "_"), *extra)
            self.assertEqual(train["train"]["summary"]["mean_test_dice"]["mean"], rows[name]["mean_test_dice"]["mean"])
            self.assertEqual(float(csv_rows[name]["mean"]), rows[name]["mean_test_dice"]["mean"])

    def test_generalize_report(self):
        run("generalize", "--config", ARGS.config, "--out", self.out("gen"))
        report = self.validate(self.out("gen"))
        g = report["generalization"]
        self.assertEqual(g["profile"], "lung_like")
        self.assertAlmostEqual(g["gain"]["mean"], g["fine_tuned_dice"]["mean"] - g["zero_shot_dice"]["mean"], places=12)

    def test_transmission_report(self):
        run("transmission", "--config", ARGS.config, "--skip-paper-scale", "--out", self.out("tx"))
        report = self.validate(self.out("tx"))
        rows = report["transmission"]["rows"]
        self.assertEqual(len(rows), 4)
        self.assertTrue(all(r["match"] for r in rows))
        with open(Path(self.out("tx")) / "transmission.csv") as f:
            self.assertEqual(len(list(csv.DictReader(f))), 4)

    def test_generate_writes_manifest(self):
        run("generate", "--profile", "brain_like", "--samples", "20", "--image-size", "8", "--out", self.out("data"))
        self.assertTrue((Path(self.out("data")) / "manifest.json").exists())

    def test_errors_are_single_line_and_nonzero(self):
        bad_key = self.root / "bad_key.json"
        bad_key.write_text('{"clientz": 3}')
        not_json = self.root / "not_json.json"
        not_json.write_text("{")
        cases = {
            "UsageError": [[], ["train", "--bogus"], ["frobnicate"]],
            "InvalidConfig": [["train", "--strategy", "fedprox"], ["train", "--clients", "-1"],
                              ["train", "--depth", "2.5"], ["train", "--config", str(bad_key)],
                              ["train", "--config", str(not_json)], ["train", "--clients", "0"],
                              ["generate", "--profile", "kidney_like"]],
            "IoError": [["train", "--config", str(self.root / "missing.json")]],
        }
        for name, argvs in cases.items():
            for argv in argvs:
                proc = run(*argv, "--out", self.out("err"), check=False) if argv and argv[0] != "frobnicate" \
                    else run(*argv, check=False)
                self.assertNotEqual(proc.returncode, 0, argv)
                self.assertRegex(proc.stderr, ERROR_LINE, argv)
                self.assertTrue(proc.stderr.startswith(f"error: {name}:"), (argv, proc.stderr))


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--cli", required=True)
    parser.add_argument("--schema", required=True)
    parser.add_argument("--config", required=True)
    ARGS, rest = parser.parse_known_args()
    unittest.main(argv=[sys.argv[0], *rest])
