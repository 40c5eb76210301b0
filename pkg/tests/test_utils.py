import json
from collections import Counter

import utils
from utils import (
    message_counts,
    print_error,
    print_info,
    print_success,
    print_warning,
    set_verbose,
    write_run_metadata,
)


def test_warnings_and_errors_go_to_stderr(capsys, monkeypatch):
    monkeypatch.setattr(utils, "MESSAGE_TALLY", Counter())
    print_success("corpus written")
    print_warning("skipped m0003: no type_ii clue")
    print_error("bad header")
    out, err = capsys.readouterr()
    assert "corpus written" in out
    assert "skipped m0003" in err and "skipped m0003" not in out
    assert "bad header" in err


def test_info_needs_verbose(capsys, monkeypatch):
    monkeypatch.setattr(utils, "MESSAGE_TALLY", Counter())
    set_verbose(False)
    print_info("hidden")
    assert capsys.readouterr().out == ""
    set_verbose(True)
    try:
        print_info("shown")
        assert "shown" in capsys.readouterr().out
    finally:
        set_verbose(False)


def test_metadata_records_message_counts(tmp_path, monkeypatch):
    monkeypatch.setattr(utils, "MESSAGE_TALLY", Counter())
    print_warning("fallback to text clue")
    print_warning("fallback to text clue")
    print_error("unusable mixture")
    assert message_counts() == {"warnings": 2, "errors": 1}

    path = write_run_metadata(str(tmp_path), "mixgen", {"name": "toy"}, {}, [])
    with open(path) as f:
        metadata = json.load(f)
    assert metadata["messages"] == {"warnings": 2, "errors": 1}
    assert metadata["command"] == "mixgen"
