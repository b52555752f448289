# Copyright 2023 NUMSnet Contributors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Versioned binary checkpoints and head replacement for transfer.

Byte layout, all integers little-endian:

    magic       8 bytes  b'NUMSCKPT'
    version     u32      1
    arch        u16 length + UTF-8 tag
    depth       u32, then depth x u32 widths
    num_classes u32
    flags       u32      bit0 batch-norm, bit1 deep supervision
    records     u32 count, then per record:
                  u16 name length, UTF-8 name, u8 trainable,
                  u8 dtype (0 float32, 1 float64), u8 ndim, ndim x u32 dims,
                  u64 byte count, raw little-endian data
    optimizer   u8 present; if 1: u64 t, 4 x f64 (lr, beta1, beta2, eps),
                u32 count and that many records named 'm/<param>' or 'v/<param>'
    checksum    u64      BLAKE2b (8-byte digest) of everything before it
"""

import collections
import hashlib
import logging
import struct

import numpy as np

from model_zoo import zoo
from tensor_engine.optim import AdamState

log = logging.getLogger(__name__)

MAGIC = b'NUMSCKPT'
VERSION = 1

FLAG_BATCH_NORM = 1
FLAG_DEEP_SUPERVISION = 2

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = dict((code, dtype) for dtype, code in _DTYPE_CODES.items())


class CheckpointError(ValueError):
    """Base class for unreadable or incompatible checkpoints."""


class ChecksumError(CheckpointError):
    """The trailing checksum does not match (corrupt or truncated file)."""


class VersionError(CheckpointError):
    """Written by a format version this code does not read."""


class FormatError(CheckpointError):
    """Not a checkpoint, or a record runs past the end of the body."""


class RecordShapeError(CheckpointError):
    """A record's name or shape does not fit the declared architecture."""


class ArchitectureMismatchError(CheckpointError):
    """The checkpoint holds a different architecture than requested."""


Record = collections.namedtuple('Record', ['name', 'trainable', 'array'])


class Checkpoint(object):
    """A parsed checkpoint: header fields, records and optimizer state."""

    def __init__(self, architecture, widths, num_classes, flags, records, optimizer=None,
                 version=VERSION):
        self.version = version
        self.architecture = architecture
        self.widths = list(widths)
        self.num_classes = num_classes
        self.flags = flags
        self.records = collections.OrderedDict((r.name, r) for r in records)
        self.optimizer = optimizer

    @property
    def batch_norm(self):
        return bool(self.flags & FLAG_BATCH_NORM)

    @property
    def deep_supervision(self):
        return bool(self.flags & FLAG_DEEP_SUPERVISION)

    @classmethod
    def from_model(cls, model, optimizer=None):
        flags = (FLAG_BATCH_NORM if model.batch_norm else 0) | \
                (FLAG_DEEP_SUPERVISION if model.deep_supervision else 0)
        records = [Record(name, p.trainable, p.data) for name, p in model.parameters.items()]
        state = getattr(optimizer, 'state', optimizer)
        return cls(model.architecture, model.widths, model.num_classes, flags, records, state)

    def build(self):
        """A freshly initialised model with this checkpoint's architecture."""
        dtype = next(iter(self.records.values())).array.dtype if self.records else np.float32
        return zoo.build_model(self.architecture, widths=self.widths, num_classes=self.num_classes,
                               batch_norm=self.batch_norm, deep_supervision=self.deep_supervision,
                               dtype=dtype)

    def to_model(self):
        model = self.build()
        expected = model.parameters
        if list(expected) != list(self.records):
            missing = sorted(set(expected) - set(self.records))
            extra = sorted(set(self.records) - set(expected))
            raise RecordShapeError('records do not match %s: missing %s, unexpected %s' % (
                self.architecture, missing[:5], extra[:5]))

        for name, record in self.records.items():
            param = expected[name]
            if record.array.shape != param.shape:
                raise RecordShapeError('%s: stored shape %s, %s expects %s' % (
                    name, list(record.array.shape), self.architecture, list(param.shape)))
            if record.trainable != param.trainable:
                raise RecordShapeError('%s: trainable flag %s does not match' % (name, record.trainable))
            param.data = record.array.astype(param.dtype, copy=True)
        return model


# writing

def _pack_text(text, width='<H'):
    raw = text.encode('utf-8')
    return struct.pack(width, len(raw)) + raw


def _pack_record(name, trainable, array):
    array = np.asarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise FormatError('%s: cannot store dtype %s' % (name, array.dtype))
    raw = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder('<')).tobytes()
    parts = [_pack_text(name),
             struct.pack('<BBB', int(bool(trainable)), _DTYPE_CODES[array.dtype], array.ndim),
             struct.pack('<%dI' % array.ndim, *array.shape),
             struct.pack('<Q', len(raw)),
             raw]
    return b''.join(parts)


def encode_checkpoint(checkpoint):
    parts = [MAGIC, struct.pack('<I', checkpoint.version), _pack_text(checkpoint.architecture),
             struct.pack('<I', len(checkpoint.widths)),
             struct.pack('<%dI' % len(checkpoint.widths), *checkpoint.widths),
             struct.pack('<II', checkpoint.num_classes, checkpoint.flags),
             struct.pack('<I', len(checkpoint.records))]
    parts.extend(_pack_record(r.name, r.trainable, r.array) for r in checkpoint.records.values())

    state = checkpoint.optimizer
    if state is None:
        parts.append(struct.pack('<B', 0))
    else:
        moments = []
        for name in state.m:
            moments.append(_pack_record('m/' + name, True, state.m[name]))
            moments.append(_pack_record('v/' + name, True, state.v[name]))
        parts.append(struct.pack('<BQ4d', 1, state.t, *state.hyperparameters()))
        parts.append(struct.pack('<I', len(moments)))
        parts.extend(moments)

    body = b''.join(parts)
    return body + hashlib.blake2b(body, digest_size=8).digest()


def save_checkpoint(model, path, optimizer=None):
    """Write `model` (and optionally an Adam optimizer or AdamState) to path."""
    payload = encode_checkpoint(Checkpoint.from_model(model, optimizer))
    with open(path, 'wb') as f:
        f.write(payload)
    log.info('saved %s checkpoint to %s (%d bytes)', model.architecture, path, len(payload))
    return len(payload)


# reading

class _Reader(object):

    def __init__(self, body):
        self.body = body
        self.offset = 0

    def take(self, size):
        end = self.offset + size
        if end > len(self.body):
            raise FormatError('record runs past the end of the checkpoint at byte %d' % self.offset)
        chunk = self.body[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, width='<H'):
        length, = self.unpack(width)
        try:
            return self.take(length).decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError('name at byte %d is not UTF-8' % self.offset)

    def record(self):
        name = self.text()
        trainable, code, ndim = self.unpack('<BBB')
        if code not in _CODE_DTYPES:
            raise FormatError('%s: unknown dtype code %d' % (name, code))
        dims = self.unpack('<%dI' % ndim)
        size, = self.unpack('<Q')
        dtype = _CODE_DTYPES[code]
        if size != int(np.prod(dims, dtype=np.int64)) * dtype.itemsize:
            raise RecordShapeError('%s: %d bytes cannot hold shape %s' % (name, size, list(dims)))
        array = np.frombuffer(self.take(size), dtype=dtype.newbyteorder('<')).reshape(dims)
        return Record(name, bool(trainable), array.astype(dtype))


def decode_checkpoint(payload):
    if len(payload) < len(MAGIC) or payload[:len(MAGIC)] != MAGIC:
        if MAGIC.startswith(payload[:len(MAGIC)]):
            raise ChecksumError('checkpoint truncated to %d bytes' % len(payload))
        raise FormatError('not a checkpoint (bad magic)')
    if len(payload) < len(MAGIC) + 12:
        raise ChecksumError('checkpoint truncated to %d bytes' % len(payload))

    body, stored = payload[:-8], payload[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != stored:
        raise ChecksumError('checksum mismatch: file is corrupt or truncated')

    reader = _Reader(body)
    reader.take(len(MAGIC))
    version, = reader.unpack('<I')
    if version != VERSION:
        raise VersionError('checkpoint version %d, this build reads version %d' % (version, VERSION))

    architecture = reader.text()
    depth, = reader.unpack('<I')
    widths = reader.unpack('<%dI' % depth)
    num_classes, flags = reader.unpack('<II')
    count, = reader.unpack('<I')
    records = [reader.record() for _ in range(count)]

    optimizer = None
    present, = reader.unpack('<B')
    if present:
        t, lr, beta1, beta2, eps = reader.unpack('<Q4d')
        optimizer = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        optimizer.t = t
        moments, = reader.unpack('<I')
        for _ in range(moments):
            record = reader.record()
            kind, _, name = record.name.partition('/')
            if kind not in ('m', 'v'):
                raise FormatError('unknown optimizer record %r' % record.name)
            getattr(optimizer, kind)[name] = record.array.copy()

    if reader.offset != len(body):
        raise FormatError('%d trailing bytes after the last record' % (len(body) - reader.offset))

    return Checkpoint(architecture, widths, num_classes, flags, records, optimizer, version)


def read_checkpoint(path):
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read())


def load_checkpoint(path, architecture=None):
    """Rebuild the saved model, every parameter bit-exact.

    Raises ArchitectureMismatchError when `architecture` is given and
    differs from the stored tag.
    """
    checkpoint = read_checkpoint(path)
    if architecture is not None and architecture != checkpoint.architecture:
        raise ArchitectureMismatchError('%s holds %s, not %s' % (path, checkpoint.architecture, architecture))
    model = checkpoint.to_model()
    log.info('loaded %s checkpoint from %s', checkpoint.architecture, path)
    return model


def transfer_adapt(source, new_num_classes, architecture=None, seed=None):
    """Copy every non-head parameter of `source` into a model with
    `new_num_classes` output planes; the head (and any deep-supervision
    heads) is freshly initialised; trainable flags are unchanged.

    source: a Checkpoint, a checkpoint path or a ModelGraph.
    """
    if new_num_classes < 1:
        raise ValueError('new_num_classes must be >= 1, got %d' % new_num_classes)

    if isinstance(source, Checkpoint):
        model = source.to_model()
    elif hasattr(source, 'parameters'):
        model = source
    else:
        model = load_checkpoint(source)

    if architecture is not None and architecture != model.architecture:
        raise ArchitectureMismatchError('cannot adapt %s as %s' % (model.architecture, architecture))

    adapted = zoo.build_model(model.architecture, widths=model.widths, num_classes=new_num_classes,
                              batch_norm=model.batch_norm, deep_supervision=model.deep_supervision,
                              dtype=model.dtype, seed=model.seed + 1 if seed is None else seed)
    heads = set(adapted.head_parameter_names())
    for name, param in adapted.parameters.items():
        if name in heads:
            continue
        param.data = model.parameters[name].data.copy()

    log.info('adapted %s head from %d to %d classes', model.architecture, model.num_classes, new_num_classes)
    return adapted
