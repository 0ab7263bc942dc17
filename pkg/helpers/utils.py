# helpers/utils.py
"""
This module provides a set of common utility functions used across the
dyslim scripts to avoid code duplication.
"""

import csv
import logging
import os
import subprocess
import sys
from typing import Any, Dict, List, Optional, Tuple

import yaml

from dyslim.errors import ConfigError, FormatError

# --- Type Aliases ---
Config = Dict[str, Any]
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


# --- Script Execution ---
def run_script(script_name: str, *args: str) -> bool:
    """
    Executes a given Python script with arguments using the same interpreter.
    Streams the script's output live.
    Returns True on success, False on failure.
    """
    command = [script_name] + list(args)
    command_str = ' '.join(command)
    print(f"----- Running: '{command_str}' -----")
    try:
        process = subprocess.Popen(
            [sys.executable] + command,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
            encoding='utf-8',
            errors='replace'
        )

        if process.stdout:
            for line in iter(process.stdout.readline, ''):
                print(line, end='')

        process.wait()
        if process.returncode != 0:
            raise subprocess.CalledProcessError(process.returncode, command_str)

        print(f"----- Finished '{command_str}' successfully -----\n")
        return True

    except FileNotFoundError:
        print(f"Error: Script '{script_name}' not found.", file=sys.stderr)
        print("Please ensure you are running this from the repository root directory.", file=sys.stderr)
        return False
    except subprocess.CalledProcessError as e:
        print(f"\nError: {command_str} failed with exit code {e.returncode}", file=sys.stderr)
        print(f"----- {command_str} failed -----", file=sys.stderr)
        return False


# --- Logging ---

def setup_run_logging(out_dir: str, append: bool = False, verbose: bool = False) -> str:
    """
    Sends log records to <out_dir>/dyslim.log. A resumed run appends to the
    existing log; otherwise it is overwritten.
    """
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "dyslim.log")
    handlers: List[logging.Handler] = [logging.FileHandler(log_path, mode='a' if append else 'w')]
    if verbose:
        handlers.append(logging.StreamHandler(sys.stderr))
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, handlers=handlers, force=True)
    return log_path


# --- YAML Configuration Handling ---

def load_yaml_config(filepath: str) -> Tuple[Any, yaml.Node]:
    """
    Loads a YAML (or JSON) document from a file. Returns the parsed data and
    its node tree, whose marks carry line numbers.
    """
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            text = f.read()
        return yaml.safe_load(text), yaml.compose(text, Loader=yaml.SafeLoader)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", filepath) from None
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"error parsing YAML: {getattr(e, 'problem', e)}", filepath,
                          mark.line + 1 if mark is not None else None) from None


def save_yaml_config(filepath: str, config_data: Config) -> None:
    """Saves the configuration data to a YAML file."""
    with open(filepath, 'w', encoding='utf-8') as f:
        yaml.safe_dump(config_data, f, default_flow_style=False, sort_keys=False, indent=2)
    logging.info(f"Configuration saved to '{filepath}'.")


# --- CSV Handling ---

def read_csv_rows(filepath: str) -> Tuple[Dict[str, str], List[str], List[Tuple[int, List[str]]]]:
    """
    Reads a CSV file with optional leading '# key: value' comment lines.
    Returns the comments as a dict, the header, and (line number, row)
    pairs for every non-empty data row.
    """
    comments: Dict[str, str] = {}
    header: Optional[List[str]] = None
    rows: List[Tuple[int, List[str]]] = []
    with open(filepath, 'r', encoding='utf-8', newline='') as file:
        for line_no, line in enumerate(file, start=1):
            if line.startswith('#'):
                key, _, value = line[1:].partition(':')
                comments[key.strip()] = value.strip()
                continue
            if not line.strip():
                continue
            row = next(csv.reader([line]))
            if header is None:
                header = row
                continue
            if len(row) != len(header):
                raise FormatError(f"{filepath}:{line_no}: expected {len(header)} fields, found {len(row)}")
            rows.append((line_no, row))
    if header is None:
        raise FormatError(f"{filepath}: no header row")
    return comments, header, rows
