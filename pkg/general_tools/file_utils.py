import csv
import json
import os
from typing import Any, Dict, Iterable, Optional, Sequence

import yaml


def make_dir(dir_path: str) -> str:
    """
    Creates <dir_path> (and any parents) if it doesn't already exist.

    :param str dir_path: The directory to create
    :return: the same path, for chaining
    """
    if dir_path and not os.path.isdir(dir_path):
        os.makedirs(dir_path, exist_ok=True)
    return dir_path


def load_json_object(file_name: str) -> Any:
    """
    Deserialize JSON from <file_name>.

    :param str file_name: The name of the file to read
    """
    with open(file_name, 'rt', encoding='utf-8') as in_file:
        return json.load(in_file)


def write_json_file(file_name: str, data: Any, indent: Optional[int] = 1) -> None:
    """
    Serialize <data> as JSON into <file_name>.

    Floats are written with repr() so that they round-trip bit-for-bit.

    :param str file_name: The file name to write, including the path
    :param data: Anything json.dump can handle
    :param int indent: JSON indentation
    """
    make_dir(os.path.dirname(file_name))
    with open(file_name, 'wt', encoding='utf-8') as out_file:
        json.dump(data, out_file, indent=indent)
        out_file.write('\n')


def load_config_file(file_name: str) -> Dict[str, Any]:
    """
    Loads a run configuration written in YAML or JSON (YAML is a superset of JSON).

    Keys may use dashes or underscores; they come back with underscores
        so that they match the click parameter names.
    """
    with open(file_name, 'rt', encoding='utf-8') as in_file:
        data = yaml.safe_load(in_file) or {}
    if not isinstance(data, dict):
        raise ValueError(f"Config file {file_name} must hold a mapping, got {type(data).__name__}")
    return {str(key).lstrip('-').replace('-', '_'): value for key, value in data.items()}


def write_csv_file(file_name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """
    Writes <rows> under <header> as CSV.

    Floats are written with repr() so that re-runs produce identical files.
    """
    make_dir(os.path.dirname(file_name))
    with open(file_name, 'wt', newline='', encoding='utf-8') as out_file:
        writer = csv.writer(out_file)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def read_csv_floats(file_name: str) -> list:
    """
    Reads numeric rows from a CSV file, skipping a header row if there is one.
    """
    rows = []
    with open(file_name, 'rt', newline='', encoding='utf-8') as in_file:
        for row in csv.reader(in_file):
            if not row or not any(cell.strip() for cell in row):
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                if rows:  # only the first row may be a header
                    raise
    return rows


def write_file(file_name: str, text: str) -> None:
    """
    Writes <text> into <file_name> (creating the folder if needed).
    """
    make_dir(os.path.dirname(file_name))
    with open(file_name, 'wt', encoding='utf-8') as out_file:
        out_file.write(text)
