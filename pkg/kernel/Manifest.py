"""Run manifests written next to the artifacts of every producing command."""
import hashlib
import json
import logging
import os
from collections import OrderedDict
from datetime import datetime

from dateutil import parser
from dateutil.tz import tzlocal

from kernel import __version__

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


def blob_hash(path):
    """Git-style blob id of one file: sha1 of 'blob <size>\\0' + contents."""
    with open(path, 'rb') as f:
        data = f.read()
    digest = hashlib.sha1(b'blob %d\0' % len(data))
    digest.update(data)
    return digest.hexdigest()


def _walk(path):
    if os.path.isfile(path):
        yield os.path.basename(path), path
        return
    for folder, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(folder, name)
            yield os.path.relpath(full, path).replace(os.sep, '/'), full


def content_hash(paths):
    """Combined hash of files and directory trees, stable under traversal order.

    Each entry contributes '<blob id> <relative path>\\n'; entries are sorted
    by path so renaming or reordering on disk only matters through the names.
    """
    entries = []
    for root in paths:
        if root is None:
            continue
        label = os.path.basename(os.path.normpath(root))
        for rel, full in _walk(root):
            if os.path.basename(full) == MANIFEST_NAME:
                continue
            entries.append(('{}/{}'.format(label, rel), blob_hash(full)))
    digest = hashlib.sha1()
    for rel, blob in sorted(entries):
        digest.update('{} {}\n'.format(blob, rel).encode('utf-8'))
    return digest.hexdigest()


class RunManifest:
    def __init__(self, command, config=None, seed=None, inputs=(), outputs=(), extra=None):
        self.command = command
        self.config = OrderedDict(config or ())
        self.seed = seed
        self.inputs = [p for p in inputs if p is not None]
        self.outputs = list(outputs)
        self.extra = OrderedDict(extra or ())
        self.timestamp = datetime.now(tzlocal())

    def as_dict(self):
        return OrderedDict((
            ('command', self.command),
            ('version', __version__),
            ('timestamp', self.timestamp.isoformat()),
            ('seed', self.seed),
            ('config', self.config),
            ('inputs', [os.path.basename(os.path.normpath(p)) for p in self.inputs]),
            ('input_hash', content_hash(self.inputs)),
            ('outputs', sorted(self.outputs)),
            ('extra', self.extra),
        ))

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, 'w') as f:
            json.dump(self.as_dict(), f, indent=2)
            f.write('\n')
        logger.debug('manifest for %s written to %s', self.command, path)
        return path


def read_manifest(path):
    """Manifest dict with ``timestamp`` parsed back into an aware datetime."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    with open(path) as f:
        data = json.load(f, object_pairs_hook=OrderedDict)
    data['timestamp'] = parser.isoparse(data['timestamp'])
    return data


if __name__ == "__main__":
    pass
