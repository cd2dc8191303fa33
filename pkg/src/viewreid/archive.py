"""Parameter archive: named float arrays plus a JSON metadata manifest.

Single ``.npz`` file; the manifest is stored under the reserved key
``__metadata__`` as a JSON string. Round-trips are exact (dtypes and bit
patterns preserved by the npz container).
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

_META_KEY = "__metadata__"


@dataclass
class ParamArchive:
    arrays: dict
    metadata: dict = field(default_factory=dict)

    def save(self, path):
        if _META_KEY in self.arrays:
            raise ValueError(f"{_META_KEY} is reserved")
        tmp = f"{path}.tmp.npz"
        with open(tmp, "wb") as fh:
            np.savez(fh, **{_META_KEY: np.array(json.dumps(self.metadata))}, **self.arrays)
        os.replace(tmp, path)

    @staticmethod
    def load(path):
        with np.load(path, allow_pickle=False) as npz:
            metadata = json.loads(str(npz[_META_KEY]))
            arrays = {k: npz[k] for k in npz.files if k != _META_KEY}
        return ParamArchive(arrays=arrays, metadata=metadata)


def config_hash(config_dict):
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(config_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
