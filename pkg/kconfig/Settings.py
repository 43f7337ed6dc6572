import os
from xml.etree import ElementTree

import numpy as np


PRECISIONS = ('double', 'single')


class SettingsError(Exception):
    pass


class Runtime:
    def __init__(self, runtime=None):
        self.precision = 'double'
        self.deterministic = True
        self.threads = 1
        if runtime is None:
            return

        self.precision = runtime.get('precision', self.precision)
        if self.precision not in PRECISIONS:
            raise SettingsError('runtime precision must be double or single, got {}'.format(self.precision))
        self.deterministic = runtime.get('deterministic', 'true').lower() == 'true'
        self.threads = int(runtime.get('threads', self.threads))

    @property
    def dtype(self):
        return np.float64 if self.precision == 'double' else np.float32


class Settings:
    def __init__(self, xmlfile=None):
        self.codeHome = os.path.dirname(os.path.abspath(__file__))
        self.home = os.path.split(self.codeHome)[0]
        self.configHome = os.path.join(self.home, 'site_config')
        xmlfile = xmlfile or os.path.join(self.configHome, 'settings.xml')

        root = None
        if os.path.isfile(xmlfile):
            root = ElementTree.parse(xmlfile).getroot()

        self.runtime = Runtime(root.find('runtime') if root is not None else None)

        self.logLevel = 'INFO'
        self.storeHome = os.path.join(self.home, 'store')
        if root is not None:
            _logging = root.find('logging')
            if _logging is not None:
                self.logLevel = _logging.get('level', self.logLevel).upper()
            _store = root.find('store')
            if _store is not None:
                path = _store.get('path')
                self.storeHome = path if os.path.isabs(path) else os.path.join(self.home, path)

        threads = os.environ.get('DEPTHFORGE_THREADS')
        if threads:
            try:
                self.runtime.threads = int(threads)
            except ValueError:
                raise SettingsError('DEPTHFORGE_THREADS must be an integer, got {!r}'.format(threads))
        if self.runtime.threads < 1:
            raise SettingsError('threads must be >= 1')

    @property
    def dtype(self):
        return self.runtime.dtype

    @property
    def deterministic(self):
        return self.runtime.deterministic

    @property
    def threads(self):
        return self.runtime.threads

    def override(self, threads=None, deterministic=None, precision=None):
        if threads is not None:
            if threads < 1:
                raise SettingsError('threads must be >= 1')
            self.runtime.threads = threads
        if deterministic is not None:
            self.runtime.deterministic = deterministic
        if precision is not None:
            if precision not in PRECISIONS:
                raise SettingsError('precision must be double or single, got {}'.format(precision))
            self.runtime.precision = precision


if __name__ == "__main__":
    pass
