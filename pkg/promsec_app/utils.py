"""
Utility functions shared by the PromSec pipeline modules
"""
import hashlib
import json
import os
import uuid
from datetime import datetime, timezone


class PipelineError(Exception):
    """Base class for every error raised by the pipeline modules."""

    def __init__(self, message, line=None, col=None, **fields):
        self.message = message
        self.line = line
        self.col = col
        self.fields = fields
        super().__init__(self.__str__())

    def __str__(self):
        if self.line is not None:
            return f"{self.message} (line {self.line}, col {self.col})"
        return self.message

    def to_dict(self):
        """Serializable form used in ledgers and audit rows"""
        data = {'error': type(self).__name__, 'message': self.message}
        if self.line is not None:
            data['line'] = self.line
            data['col'] = self.col
        for key, value in self.fields.items():
            data[key] = value if isinstance(value, (int, float, str, bool, type(None))) else str(value)
        return data


class IoError(PipelineError):
    pass


def sha256_text(text):
    """
    Stable digest of a source text.

    Args:
        text: Unicode string

    Returns:
        Hex SHA-256 of the UTF-8 encoding
    """
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def new_run_id(prefix='run'):
    """Sortable run identifier: prefix, UTC timestamp, short random suffix"""
    stamp = datetime.now(timezone.utc).strftime('%Y%m%dT%H%M%S')
    return f"{prefix}-{stamp}-{uuid.uuid4().hex[:6]}"


def canonical_json(data):
    """JSON with sorted keys and no insignificant whitespace"""
    return json.dumps(data, sort_keys=True, separators=(',', ':'), ensure_ascii=False)


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create directory {path}: {e}")
    return path


def write_text(path, text):
    """Write UTF-8 text, creating parent directories"""
    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    try:
        with open(path, 'w', encoding='utf-8', newline='') as fh:
            fh.write(text)
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}")
    return path


def read_text(path):
    try:
        with open(path, 'r', encoding='utf-8', newline='') as fh:
            return fh.read()
    except FileNotFoundError:
        raise IoError(f"File not found: {path}", path=path)
    except (OSError, UnicodeDecodeError) as e:
        raise IoError(f"Cannot read {path}: {e}", path=path)


def data_path(name):
    """Path of a bundled file under promsec_app/data"""
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data', name)
