"""
The command line, end to end
============================

"""

# a project directory: a corpus file and a YAML config that points at mock backends
import sys
import tempfile
from pathlib import Path

from click.testing import CliRunner

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from helpers import STAGES, write_project  # noqa: E402

from instruction_corpus.cli import main  # noqa: E402

config = write_project(Path(tempfile.mkdtemp()) / "project", seed=7)
print(config.read_text())

# each stage reads what the previous one wrote
runner = CliRunner()
for stage in STAGES:
    result = runner.invoke(main, ["--config", str(config), *stage])
    print(f"$ instruction-corpus {' '.join(stage)}  (exit {result.exit_code})")
    print("\n".join(result.output.splitlines()[:8]))

# a dry run prints the plan and calls nothing
print(runner.invoke(main, ["--config", str(config), "--dry-run", "run"]).output)

# errors are one line on stderr with a nonzero exit
broken = config.parent / "broken.yaml"
broken.write_text("tasks: {}\nbogus: 1\n")
result = runner.invoke(main, ["--config", str(broken), "ingest"])
print(result.exit_code, result.stderr)
