'''
On-disk cache of subgraph sequences, keyed by graph content hash and k.

Layout: <cache_dir>/<hash>-k<k>.json holds the graph document plus the
subgraph membership; <hash>-k<k>.manifest.json holds hash, k and the tool
version that wrote it.
'''

import json
import logging
from pathlib import Path

from config.settings import CACHE_DIR, TOOL_VERSION
from planner.errors import CorruptCacheError, SchemaError
from planner.graph_core import ModelGraph, graph_fingerprint, ingest_graph, serialize_graph
from planner.sharder import Subgraph, SubgraphSequence
from storage.artifacts import write_json_atomic

logger = logging.getLogger(__name__)


class SequenceCacheManager:
    def __init__(self, cache_dir=None):
        self.cache_dir = Path(cache_dir or CACHE_DIR)

    def paths(self, fingerprint: str, k: int) -> tuple[Path, Path]:
        stem = f"{fingerprint}-k{k}"
        return self.cache_dir / f"{stem}.json", self.cache_dir / f"{stem}.manifest.json"

    def store(self, graph: ModelGraph, seq: SubgraphSequence, k: int) -> Path:
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        fingerprint = graph_fingerprint(graph)
        data_path, manifest_path = self.paths(fingerprint, k)

        payload = {
            "graph": serialize_graph(graph),
            "subgraphs": [
                {
                    "index": sg.index,
                    "nodes": sg.node_ids,
                    "inputs": list(sg.inputs),
                    "outputs": list(sg.outputs),
                }
                for sg in seq
            ],
            "input_owner": seq.input_owner,
            "merges": seq.merges,
        }
        write_json_atomic(data_path, payload)
        write_json_atomic(manifest_path, {"hash": fingerprint, "k": k, "tool_version": TOOL_VERSION})
        logger.info("Cached %d subgraphs at %s", len(seq), data_path)
        return data_path

    def _decode(self, fingerprint: str, k: int, data_path: Path, manifest_path: Path) -> SubgraphSequence | None:
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            payload = json.loads(data_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise CorruptCacheError(f"unreadable cache entry {data_path.name}: {e}") from e

        if not isinstance(manifest, dict) or manifest.get("hash") != fingerprint or manifest.get("k") != k:
            logger.info("Cache manifest mismatch for %s", data_path.name)
            return None
        if manifest.get("tool_version") != TOOL_VERSION:
            logger.info("Cache entry %s written by tool %s, ignoring", data_path.name, manifest.get("tool_version"))
            return None

        try:
            graph = ingest_graph(payload["graph"])
            if graph_fingerprint(graph) != fingerprint:
                return None
            subgraphs = []
            for entry in payload["subgraphs"]:
                nodes = tuple(graph.node(node_id) for node_id in entry["nodes"])
                subgraphs.append(Subgraph(
                    index=entry["index"],
                    nodes=nodes,
                    inputs=tuple(entry["inputs"]),
                    outputs=tuple(entry["outputs"]),
                    param_count=sum(n.param_count for n in nodes),
                ))
            return SubgraphSequence(
                subgraphs=tuple(subgraphs),
                input_owner=dict(payload["input_owner"]),
                merges=payload.get("merges", 0),
            )
        except (KeyError, TypeError, SchemaError) as e:
            raise CorruptCacheError(f"malformed cache entry {data_path.name}: {e}") from e

    def load(self, fingerprint: str, k: int) -> SubgraphSequence | None:
        data_path, manifest_path = self.paths(fingerprint, k)
        if not data_path.exists() or not manifest_path.exists():
            logger.debug("Cache miss for %s k=%d", fingerprint[:12], k)
            return None
        try:
            return self._decode(fingerprint, k, data_path, manifest_path)
        except CorruptCacheError as e:
            logger.warning("Ignoring corrupt cache entry: %s", e)
            return None


def cache_sequence(graph: ModelGraph, seq: SubgraphSequence, k: int, cache_dir=None) -> Path:
    return SequenceCacheManager(cache_dir).store(graph, seq, k)


def load_cached(fingerprint: str, k: int, cache_dir=None) -> SubgraphSequence | None:
    return SequenceCacheManager(cache_dir).load(fingerprint, k)
