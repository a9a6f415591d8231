"""
Versioned pipeline artifacts.

Every artifact records ``kind``, ``schema_version``, ``config_hash`` and
``seed``: JSON files wrap their payload as ``{"meta": ..., "data": ...}``,
JSONL files start with the meta object as a header line, and CSV files
start with ``# <meta json>``. Readers refuse artifacts from another
configuration or schema.
"""
import csv
import hashlib
import io
import json
import os
import time
from typing import Dict, Iterable, List, Optional, Sequence

from drrel.exceptions import MissingArtifactError, SchemaError, StaleArtifactError
from drrel.log import logger

# artifact file -> stage that writes it
PRODUCERS = {
    'catalog.json': 'simulate',
    'sessions.jsonl': 'simulate',
    'randomized_sessions.jsonl': 'simulate',
    'randomization.jsonl': 'simulate',
    'examination_truth.jsonl': 'simulate',
    'exam_model.json': 'train-exam',
    'exam_curves.csv': 'train-exam',
    'exam_report.json': 'train-exam',
    'imputation_model.json': 'train-imp',
    'affine_model.json': 'train-affine',
    'tracking_snapshot.json': 'train-affine',
    'annotated_sessions.jsonl': 'train-affine',
    'randomization_features.csv': 'train-affine',
    'tradeoff_model.json': 'train-tradeoff',
    'scorer_bundle.json': 'train-tradeoff',
    'scores.csv': 'score',
    'report.csv': 'evaluate',
    'per_query.csv': 'evaluate',
    'acceptance.json': 'evaluate',
    'theory_report.csv': 'verify-theory',
    'theory_checks.json': 'verify-theory',
}


def sha256_file(path) -> str:
    sha = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            sha.update(chunk)
    return sha.hexdigest()


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True)


class ArtifactStore(object):
    """Reads and writes the artifacts of one experiment directory."""

    def __init__(self, root, config_hash, seed):
        self.root = root
        self.config_hash = config_hash
        self.seed = seed
        os.makedirs(root, exist_ok=True)

    def path(self, name) -> str:
        return os.path.join(self.root, name)

    def exists(self, name) -> bool:
        return os.path.isfile(self.path(name))

    def meta(self, kind, schema_version) -> dict:
        return {'kind': kind, 'schema_version': schema_version, 'config_hash': self.config_hash, 'seed': self.seed}

    def _write(self, name, text):
        with open(self.path(name), 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
        return self.path(name)

    def _require(self, name):
        if not self.exists(name):
            raise MissingArtifactError(self.path(name), PRODUCERS.get(name, 'unknown'))

    def _verify(self, name, meta, kind, schema_version):
        if not isinstance(meta, dict):
            raise SchemaError('{} has no artifact header'.format(name))
        if meta.get('kind') != kind or meta.get('schema_version') != schema_version:
            raise SchemaError('{} is a {} artifact ({}), expected {} ({})'.format(
                name, meta.get('kind'), meta.get('schema_version'), kind, schema_version))
        if meta.get('config_hash') != self.config_hash or meta.get('seed') != self.seed:
            raise StaleArtifactError('{} was produced under config {} seed {}, current is config {} seed {}; '
                                     'rerun the `{}` stage'.format(name, meta.get('config_hash'), meta.get('seed'),
                                                                   self.config_hash, self.seed,
                                                                   PRODUCERS.get(name, 'unknown')))

    def write_json(self, name, kind, schema_version, data) -> str:
        return self._write(name, canonical_json({'meta': self.meta(kind, schema_version), 'data': data}) + '\n')

    def read_json(self, name, kind, schema_version):
        self._require(name)
        with open(self.path(name), encoding='utf-8') as f:
            payload = json.load(f)
        self._verify(name, payload.get('meta'), kind, schema_version)
        return payload['data']

    def write_jsonl(self, name, kind, schema_version, records: Iterable) -> str:
        lines = [canonical_json(self.meta(kind, schema_version))]
        for record in records:
            lines.append(record if isinstance(record, str) else canonical_json(record))
        return self._write(name, '\n'.join(lines) + '\n')

    def read_jsonl_lines(self, name, kind, schema_version) -> List[str]:
        """Body lines of a JSONL artifact, header verified and stripped."""
        self._require(name)
        with open(self.path(name), encoding='utf-8') as f:
            lines = f.read().splitlines()
        header = json.loads(lines[0]) if lines else None
        self._verify(name, header, kind, schema_version)
        return lines[1:]

    def read_jsonl(self, name, kind, schema_version) -> List[dict]:
        return [json.loads(line) for line in self.read_jsonl_lines(name, kind, schema_version) if line.strip()]

    def write_csv(self, name, kind, schema_version, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
        buf = io.StringIO()
        buf.write('# ' + canonical_json(self.meta(kind, schema_version)) + '\n')
        writer = csv.writer(buf, lineterminator='\n')
        writer.writerow(columns)
        writer.writerows(rows)
        return self._write(name, buf.getvalue())

    def write_csv_text(self, name, kind, schema_version, text: str) -> str:
        return self._write(name, '# ' + canonical_json(self.meta(kind, schema_version)) + '\n' + text)

    def read_csv(self, name, kind, schema_version) -> List[Dict[str, str]]:
        self._require(name)
        with open(self.path(name), encoding='utf-8', newline='') as f:
            first = f.readline()
            if not first.startswith('# '):
                raise SchemaError('{} has no artifact header'.format(name))
            self._verify(name, json.loads(first[2:]), kind, schema_version)
            return list(csv.DictReader(f))

    def sha256(self, name) -> str:
        return sha256_file(self.path(name))


class StageRecorder(object):
    """
    Context manager around one stage: times it, logs start and finish, and
    writes ``<stage>.manifest.json`` with input/output hashes.
    """

    def __init__(self, store: ArtifactStore, stage: str, inputs: Sequence[str] = ()):
        self.store = store
        self.stage = stage
        self.inputs = list(inputs)
        self.outputs: List[str] = []
        self.log = logger.bind(stage=stage)
        self._started: Optional[float] = None

    def output(self, name):
        self.outputs.append(name)
        return name

    def __enter__(self):
        for name in self.inputs:
            self.store._require(name)
        self._started = time.monotonic()
        self.log.info('stage started', inputs=self.inputs)
        return self

    def __exit__(self, exc_type, exc, tb):
        duration = time.monotonic() - self._started
        if exc_type is not None:
            self.log.error('stage failed', duration_s=round(duration, 3), error=str(exc))
            return False
        manifest = {
            'stage': self.stage,
            'config_hash': self.store.config_hash,
            'seed': self.store.seed,
            'duration_s': round(duration, 3),
            'inputs': dict((n, self.store.sha256(n)) for n in self.inputs),
            'outputs': dict((n, self.store.sha256(n)) for n in self.outputs),
        }
        self.store._write('{}.manifest.json'.format(self.stage), json.dumps(manifest, sort_keys=True, indent=2) + '\n')
        self.log.info('stage finished', duration_s=manifest['duration_s'], outputs=self.outputs)
        return False
