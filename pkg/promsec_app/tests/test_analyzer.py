"""
Tests for the builtin rule table and the external analyzer adapter
"""
import json

from django.core.cache import cache
from django.test import SimpleTestCase

from promsec_app.corpus import CorpusSpec, generate_corpus
from promsec_app.security_analyzer import (
    EXTERNAL, Analyzer, AnalyzerConfig, AnalyzerError, ReportParseError, SecurityReport, ToolNotFound,
    analyze_builtin, analyze_external, parse_external_report,
)

from .fixtures import HARDCODED_SECRETS, SECURE_LOOKUP, VULNERABLE_LOOKUP, unit


def found(report):
    return {(f.cwe, f.line) for f in report.findings}


class BuiltinRulesTest(SimpleTestCase):
    """Test CWE detection by the builtin rule table"""

    def test_injection_findings(self):
        """Test that tainted SQL and shell commands are reported with high confidence"""
        report = analyze_builtin(unit(VULNERABLE_LOOKUP))
        self.assertEqual(report.k, 2)
        self.assertEqual(found(report), {(89, 6), (78, 7)})
        self.assertTrue(all(f.confidence == 'high' for f in report.findings))

    def test_secure_twin_is_clean(self):
        """Test that bound parameters and quoted arguments are not reported"""
        self.assertEqual(analyze_builtin(unit(SECURE_LOOKUP)).k, 0)

    def test_hardcoded_values(self):
        """Test passwords, credentials, weak randomness and weak hashes"""
        report = analyze_builtin(unit(HARDCODED_SECRETS))
        self.assertEqual(found(report), {(259, 3), (798, 4), (330, 5), (327, 6)})
        self.assertEqual(report.cwes(), [259, 327, 330, 798])
        self.assertEqual(report.lines(), [3, 4, 5, 6])

    def test_literal_shell_command(self):
        """Test that shell=True is reported even with a literal command"""
        report = analyze_builtin(unit('import subprocess\nsubprocess.call("ls", shell=True)\n'))
        self.assertEqual(found(report), {(78, 2)})
        self.assertEqual(report.findings[0].confidence, 'low')

    def test_literal_command_without_shell(self):
        """Test that a constant command without a shell is not reported"""
        self.assertEqual(analyze_builtin(unit('import os\nos.system("ls")\n')).k, 0)

    def test_path_traversal(self):
        """Test that opening a user supplied path is reported and basename clears it"""
        bad = 'name = input()\nfh = open("/srv/" + name)\n'
        good = 'import os\nname = os.path.basename(input())\nfh = open("/srv/" + name)\n'
        self.assertEqual(found(analyze_builtin(unit(bad))), {(22, 2)})
        self.assertEqual(analyze_builtin(unit(good)).k, 0)

    def test_shell_command_from_variable(self):
        """Test that a shell command held in a variable is reported with low confidence"""
        report = analyze_builtin(unit('import os\ncmd = "ls -l /tmp"\nos.system(cmd)\n'))
        self.assertEqual(found(report), {(78, 3)})
        self.assertEqual(report.findings[0].confidence, 'low')

    def test_shell_command_concatenated_from_constant(self):
        """Test that a shell command concatenated from a local constant is reported"""
        report = analyze_builtin(unit('import os\nsuffix = "-l"\nos.system("ls " + suffix)\n'))
        self.assertEqual(found(report), {(78, 3)})
        self.assertEqual(report.findings[0].confidence, 'low')

    def test_sanitized_shell_operand_is_clean(self):
        """Test that operands passed through a sanitizer are exempt"""
        text = 'import os\nimport shlex\nsuffix = shlex.quote("-l")\nos.system("ls " + suffix)\n'
        self.assertEqual(analyze_builtin(unit(text)).k, 0)

    def test_argument_list_without_shell(self):
        """Test that an argument list run without a shell is not reported"""
        text = 'import subprocess\ncmd = ["ls", "-l"]\nsubprocess.call(cmd)\n'
        self.assertEqual(analyze_builtin(unit(text)).k, 0)

    def test_path_concatenated_from_constant(self):
        """Test that a path concatenated from a local constant is reported with low confidence"""
        report = analyze_builtin(unit('name = "report.txt"\nfh = open("/srv/" + name)\n'))
        self.assertEqual(found(report), {(22, 2)})
        self.assertEqual(report.findings[0].confidence, 'low')

    def test_path_from_constant_variable(self):
        """Test that opening a path held in a constant variable is not reported"""
        self.assertEqual(analyze_builtin(unit('name = "report.txt"\nfh = open(name)\n')).k, 0)

    def test_deserialization(self):
        """Test pickle and yaml loading rules"""
        text = ('import pickle\nimport yaml\ndef f(blob, text):\n'
                '    obj = pickle.loads(blob)\n'
                '    a = yaml.load(text)\n'
                '    b = yaml.load(text, Loader=yaml.SafeLoader)\n'
                '    c = yaml.safe_load(text)\n')
        self.assertEqual(found(analyze_builtin(unit(text))), {(502, 4), (502, 5)})

    def test_hash_not_for_security(self):
        """Test that md5 with usedforsecurity=False is not reported"""
        text = 'import hashlib\nh = hashlib.md5(b, usedforsecurity=False)\n'
        self.assertEqual(analyze_builtin(unit(text)).k, 0)

    def test_seeded_corpus_lines_detected(self):
        """Test that every seeded weakness is found on its line and clean twins report nothing"""
        for program in generate_corpus(CorpusSpec(count=30, seed=13)):
            expected = {(s['cwe'], s['line']) for s in program.seeded}
            self.assertEqual(found(analyze_builtin(program.unit)), expected, program.id)
            self.assertEqual(analyze_builtin(program.clean).k, 0, program.id)

    def test_report_is_deterministic(self):
        """Test that the same unit always gives the same canonical report"""
        first = analyze_builtin(unit(HARDCODED_SECRETS)).to_dict()
        second = analyze_builtin(unit(HARDCODED_SECRETS)).to_dict()
        self.assertEqual(json.dumps(first, sort_keys=True), json.dumps(second, sort_keys=True))

    def test_report_round_trip(self):
        """Test that a report rebuilds from its dictionary form"""
        report = analyze_builtin(unit(VULNERABLE_LOOKUP))
        again = SecurityReport.from_dict(report.to_dict())
        self.assertEqual(again.findings, report.findings)


class AnalyzerCacheTest(SimpleTestCase):
    """Test report memoization by unit digest"""

    def setUp(self):
        """Set up an empty cache"""
        cache.clear()

    def test_cached_report_takes_new_unit_id(self):
        """Test that a cached report is relabelled for the requesting unit"""
        analyzer = Analyzer(AnalyzerConfig())
        first = analyzer.analyze(unit(VULNERABLE_LOOKUP, id='one'))
        second = analyzer.analyze(unit(VULNERABLE_LOOKUP, id='two'))
        self.assertEqual(second.unit_id, 'two')
        self.assertEqual(second.findings, first.findings)

    def test_graphs_for_rules(self):
        """Test that the analyzer exposes the AST and DFG it evaluates"""
        ast, dfg = Analyzer().graphs(unit(VULNERABLE_LOOKUP))
        self.assertEqual(ast.kind, 'AST')
        self.assertEqual(dfg.kind, 'DFG')


class ExternalAnalyzerTest(SimpleTestCase):
    """Test the Bandit-style report adapter"""

    def result(self, **overrides):
        item = {'issue_cwe': {'id': 78}, 'line_number': 2, 'test_id': 'B605',
                'issue_confidence': 'HIGH', 'issue_text': 'shell call'}
        item.update(overrides)
        return item

    def test_parse_results(self):
        """Test that results become findings with normalized confidence"""
        text = json.dumps({'results': [self.result(), self.result(issue_cwe={'id': 400}, line_number=1)]})
        findings = parse_external_report(text, unit('a = 1\nb = 2\nc = 3\n'))
        self.assertEqual([(f.cwe, f.line, f.confidence) for f in findings], [(78, 2, 'high'), (400, 1, 'high')])
        self.assertFalse(findings[0].external)
        self.assertTrue(findings[1].external)

    def test_malformed_report(self):
        """Test that non-JSON and missing results are parse errors"""
        target = unit('a = 1\n')
        with self.assertRaises(ReportParseError):
            parse_external_report('<html>', target)
        with self.assertRaises(ReportParseError):
            parse_external_report('{"errors": []}', target)
        with self.assertRaises(ReportParseError):
            parse_external_report(json.dumps({'results': [{'line_number': 1}]}), target)

    def test_line_outside_unit(self):
        """Test that a finding past the last line is rejected"""
        text = json.dumps({'results': [self.result(line_number=9)]})
        with self.assertRaises(ReportParseError):
            parse_external_report(text, unit('a = 1\n'))

    def test_missing_tool(self):
        """Test that an absent analyzer binary raises ToolNotFound"""
        config = AnalyzerConfig(mode=EXTERNAL, command='promsec-no-such-analyzer {input-file}')
        with self.assertRaises(ToolNotFound):
            analyze_external(unit('a = 1\n'), config)

    def test_command_placeholders(self):
        """Test that the command template receives the temp file paths"""
        config = AnalyzerConfig(command='tool -o {report-file} {input-file}')
        self.assertEqual(config.argv('/tmp/u.py', '/tmp/r.json'), ['tool', '-o', '/tmp/r.json', '/tmp/u.py'])

    def test_invalid_config(self):
        """Test that unknown modes and non-positive timeouts are rejected"""
        with self.assertRaises(AnalyzerError):
            AnalyzerConfig(mode='magic')
        with self.assertRaises(AnalyzerError):
            AnalyzerConfig(timeout=0)
