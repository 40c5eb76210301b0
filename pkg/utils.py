"""
Console output and run bookkeeping shared by every command.

Messages go through one rich console per stream: progress, info and
success lines to stdout, warnings and errors to stderr. Info lines are
shown only in verbose mode. Warnings are tallied so each command can
record how many items it skipped or fell back on.
"""

import hashlib
import json
import os
import time
from collections import Counter
from typing import Any, Dict, Iterable, List, Optional

from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeRemainingColumn
from rich.table import Table

console = Console()
err_console = Console(stderr=True)

VERBOSE_OUTPUT = os.getenv("STYLETSE_VERBOSE", "").lower() == "true"

# level -> (style, marker, stream)
LEVELS = {
    "success": ("bold green", "✓", console),
    "info": ("bold cyan", "i", console),
    "warning": ("bold yellow", "!", err_console),
    "error": ("bold red", "✗", err_console),
}
MESSAGE_TALLY: Counter = Counter()


def set_verbose(verbose: bool):
    """Turn info-level output on or off."""
    global VERBOSE_OUTPUT
    VERBOSE_OUTPUT = verbose


def _emit(level: str, text: str):
    MESSAGE_TALLY[level] += 1
    style, marker, stream = LEVELS[level]
    stream.print(f"[{style}]{marker}[/{style}] {text}", highlight=False)


def print_header(text: str):
    """Start a new section of command output."""
    console.rule(f"[bold blue]{text}[/bold blue]", align="left")


def print_success(text: str):
    _emit("success", text)


def print_error(text: str):
    _emit("error", text)


def print_warning(text: str):
    """Report a recoverable problem (skipped item, fallback, truncation)."""
    _emit("warning", text)


def print_info(text: str):
    if VERBOSE_OUTPUT:
        _emit("info", text)


def message_counts() -> Dict[str, int]:
    """Warnings and errors issued so far in this process."""
    return {"warnings": MESSAGE_TALLY["warning"], "errors": MESSAGE_TALLY["error"]}


def _format_cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def print_report_table(title: str, columns: List[str], rows: List[List[Any]]):
    """Print a dB results table.

    The first column is the row label; the rest are right-aligned numbers
    shown to two decimals, with missing cells as "-".
    """
    table = Table(title=title)
    table.add_column(columns[0], style="cyan")
    for column in columns[1:]:
        table.add_column(column, style="green", justify="right")
    for row in rows:
        table.add_row(*[_format_cell(cell) for cell in row])
    console.print(table)


def print_stats_table(title: str, stats: Dict[str, Any]):
    table = Table(title=title, show_header=False)
    table.add_column("statistic", style="cyan")
    table.add_column("value", style="magenta", justify="right")
    for key, value in stats.items():
        table.add_row(key, _format_cell(value))
    console.print(table)


def print_panel(text: str, title: Optional[str] = None):
    console.print(Panel(text, title=title, border_style="green"))


def get_rich_progress() -> Progress:
    """Progress bar with item counts and time remaining, for per-mixture loops."""
    return Progress(
        TextColumn("[bold blue]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeRemainingColumn(),
        console=console,
    )


def content_hash(paths: Iterable[str]) -> str:
    """Hash the contents of a set of files (order-independent).

    Missing paths contribute their name only, so the hash still changes when
    an expected input disappears.
    """
    digest = hashlib.sha256()
    for path in sorted(str(p) for p in paths):
        digest.update(path.encode("utf-8"))
        if os.path.isfile(path):
            with open(path, "rb") as f:
                for block in iter(lambda: f.read(1 << 20), b""):
                    digest.update(block)
    return digest.hexdigest()


def write_jsonl(path: str, rows: Iterable[Dict[str, Any]]):
    """Write one JSON object per line."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def append_jsonl(path: str, row: Dict[str, Any]):
    """Append a single JSON line, creating the file if needed."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    """Read a JSONL file, skipping blank lines."""
    rows = []
    with open(path, "r") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def write_run_metadata(output_dir: str, command: str, config: Dict[str, Any],
                       overrides: Dict[str, Any], inputs: Iterable[str],
                       extra: Optional[Dict[str, Any]] = None) -> str:
    """Record what a command ran with.

    Args:
        output_dir: Directory to write into.
        command: Subcommand name.
        config: The resolved configuration.
        overrides: Every non-default setting and where it came from.
        inputs: Input files whose contents are hashed.
        extra: Command-specific fields.

    Returns:
        Path of the metadata file.
    """
    inputs = list(inputs)
    metadata = {
        "command": command,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": config,
        "overrides": overrides,
        "inputs": sorted(str(p) for p in inputs),
        "input_hash": content_hash(inputs),
        "messages": message_counts(),
    }
    if extra:
        metadata.update(extra)

    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, f"{command}_metadata.json")
    with open(path, "w") as f:
        json.dump(metadata, f, indent=2, sort_keys=True)
    return path
