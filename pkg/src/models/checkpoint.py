from abc import ABC, abstractmethod
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import yaml

from src.configs import ModelConfig
from src.models.transformer import ModelWeights, assemble_weights
from src.tensor_core.tensor import Tensor
from src.utils.errors import ConfigError
from src.utils.get_size import get_size
from src.utils.monitors import HighLevelErrors, ModelingOperation

MANIFEST_NAME = "manifest.yaml"
BLOB_NAME = "weights.bin"
BLOB_DTYPE = "<f8"


class ICheckpointStore(ABC):
    @abstractmethod
    def save(self, weights: ModelWeights, meta: Optional[Dict[str, Any]] = None) -> Path:
        pass

    @abstractmethod
    def load(self) -> ModelWeights:
        pass


class CheckpointStore(ICheckpointStore):
    """
    Checkpoint directory: manifest.yaml (config fields, parameter names, shapes,
    byte offsets, dtype, endianness) plus weights.bin, one flat little-endian float64 blob.
    """

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    @property
    def manifest_path(self) -> Path:
        return self.directory / MANIFEST_NAME

    @property
    def blob_path(self) -> Path:
        return self.directory / BLOB_NAME

    def exists(self) -> bool:
        return self.manifest_path.exists() and self.blob_path.exists()

    def save_arrays(self, named: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        entries, offset = [], 0
        with open(self.blob_path, "wb") as blob:
            for name, array in named.items():
                raw = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes(order="C")
                blob.write(raw)
                entries.append({"name": name, "shape": list(np.shape(array)), "offset": offset,
                                "nbytes": len(raw)})
                offset += len(raw)
        manifest = {"format": "focusft-checkpoint", "version": 1, "dtype": "float64",
                    "endianness": "little", "meta": dict(meta or {}), "parameters": entries}
        with open(self.manifest_path, "w") as file:
            yaml.safe_dump(manifest, file, sort_keys=False)
        ModelingOperation.info(f"Checkpoint written to {self.directory} ({get_size(self.blob_path)}).")
        return self.directory

    def load_arrays(self) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
        if not self.exists():
            message = f"No checkpoint found in {self.directory}."
            HighLevelErrors.error(message)
            raise FileNotFoundError(message)
        with open(self.manifest_path, "r") as file:
            manifest = yaml.safe_load(file)
        if manifest.get("dtype") != "float64" or manifest.get("endianness") != "little":
            message = f"Unsupported checkpoint encoding {manifest.get('dtype')}/{manifest.get('endianness')}."
            HighLevelErrors.error(message)
            raise ConfigError(message)
        raw = self.blob_path.read_bytes()
        named = {}
        for entry in manifest["parameters"]:
            chunk = raw[entry["offset"]: entry["offset"] + entry["nbytes"]]
            named[entry["name"]] = np.frombuffer(chunk, dtype=BLOB_DTYPE).reshape(entry["shape"]).astype(np.float64)
        return named, manifest.get("meta", {})

    def save(self, weights: ModelWeights, meta: Optional[Dict[str, Any]] = None) -> Path:
        """Persist θ; meta is stored next to the model config in the manifest."""
        payload = {"kind": "model", "model_config": asdict(weights.config)}
        payload.update(meta or {})
        return self.save_arrays({name: p.data for name, p in weights.named_parameters()}, payload)

    def load(self) -> ModelWeights:
        named, meta = self.load_arrays()
        if meta.get("kind") != "model":
            message = f"{self.directory} holds a '{meta.get('kind')}' dump, not model weights."
            HighLevelErrors.error(message)
            raise ConfigError(message)
        config = ModelConfig(**meta["model_config"]).validate()
        tensors = {name: Tensor(array, requires_grad=True, name=name) for name, array in named.items()}
        try:
            weights = assemble_weights(config, tensors)
        except KeyError as e:
            message = f"Checkpoint in {self.directory} is missing parameter {e}."
            HighLevelErrors.error(message)
            raise ConfigError(message) from e
        ModelingOperation.info(f"Loaded checkpoint from {self.directory}.")
        return weights

    def meta(self) -> Dict[str, Any]:
        with open(self.manifest_path, "r") as file:
            return yaml.safe_load(file).get("meta", {})
