"""Self-describing binary container for tensors.

Layout (all integers little-endian)::

    b'NMDK'  u32 version  4-byte file kind  u32 record count
    record*: 4-byte tag  u16 name length  dtype code  u8 ndim
             name (utf-8)  ndim x u32 dims  payload

Model checkpoints, reference statistics and detectors all use it, told apart
by the file kind (``MODL``, ``REFS``, ``DETR``).
"""
from enum import Enum
import struct
from typing import List, Optional

import numpy as np

MAGIC = b'NMDK'
FORMAT_VERSION = 1

_header = struct.Struct('<4sI4sI')
_record_header = struct.Struct('<4sHcB')
_dim = struct.Struct('<I')

# One-letter type codes, as in struct-style signatures
dtype_codes = {
    b'd': np.dtype('<f8'),  # double
    b'f': np.dtype('<f4'),  # single
    b'x': np.dtype('<i8'),  # signed 64-bit
}


def _code_for(dtype) -> Optional[bytes]:
    for code, dt in dtype_codes.items():
        if dtype.kind == dt.kind and dtype.itemsize == dt.itemsize:
            return code
    return None


class EnvelopeError(ValueError):
    """Raised when a container file can't be parsed"""
    pass


class FileKind(Enum):
    model = b'MODL'
    refs = b'REFS'
    detector = b'DETR'


def _check_tag(tag: bytes):
    if len(tag) != 4 or not tag.isascii():
        raise ValueError(f"Record tags are 4 ASCII bytes, not {tag!r}")


class Record:
    """One named tensor with a 4-byte kind tag"""
    def __init__(self, tag: bytes, name: str, data):
        _check_tag(tag)
        self.tag = tag
        self.name = name
        self.data = np.asarray(data)
        if _code_for(self.data.dtype) is None:
            raise TypeError(f"Can't store {self.data.dtype} data in a record")

    def __repr__(self):
        return 'Record({!r}, {!r}, shape={})'.format(
            self.tag, self.name, self.data.shape)

    def serialise(self) -> bytes:
        name = self.name.encode('utf-8')
        code = _code_for(self.data.dtype)
        payload = np.ascontiguousarray(self.data, dtype=dtype_codes[code]).tobytes()
        return b''.join([
            _record_header.pack(self.tag, len(name), code, self.data.ndim),
            name,
            b''.join(_dim.pack(d) for d in self.data.shape),
            payload,
        ])

    @classmethod
    def parse_data(cls, buf, pos):
        end = pos + _record_header.size
        if end > len(buf):
            raise EnvelopeError("truncated file (record header)")
        tag, name_len, code, ndim = _record_header.unpack(buf[pos:end])
        if code not in dtype_codes:
            raise EnvelopeError(f"Unknown dtype code {code!r} in record")
        pos = end

        end = pos + name_len + ndim * _dim.size
        if end > len(buf):
            raise EnvelopeError("truncated file (record name/shape)")
        try:
            name = buf[pos:pos + name_len].decode('utf-8')
        except UnicodeDecodeError:
            raise EnvelopeError("record name is not valid UTF-8") from None
        pos += name_len
        shape = tuple(_dim.unpack_from(buf, pos + i * _dim.size)[0]
                      for i in range(ndim))
        pos = end

        dtype = dtype_codes[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(buf):
            raise EnvelopeError(f"truncated file (payload of {name!r})")
        data = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                             offset=pos).reshape(shape)
        # Native byte order, writable copy
        return cls(tag, name, data.astype(dtype.newbyteorder('='))), pos + nbytes


class Envelope:
    """An ordered collection of records of one file kind"""
    def __init__(self, kind: FileKind, records: Optional[List[Record]] = None):
        self.kind = kind
        self.records = list(records or [])

    def __repr__(self):
        return 'Envelope({}, {} records)'.format(self.kind.name, len(self.records))

    def add(self, tag: bytes, name: str, data):
        self.records.append(Record(tag, name, data))

    def __getitem__(self, name) -> np.ndarray:
        for r in self.records:
            if r.name == name:
                return r.data
        raise KeyError(name)

    def __contains__(self, name):
        return any(r.name == name for r in self.records)

    def serialise(self) -> bytes:
        head = _header.pack(MAGIC, FORMAT_VERSION, self.kind.value, len(self.records))
        return head + b''.join(r.serialise() for r in self.records)

    @classmethod
    def from_buffer(cls, buf: bytes, kind: Optional[FileKind] = None) -> 'Envelope':
        if len(buf) < _header.size:
            if buf[:4] != MAGIC[:len(buf[:4])]:
                raise EnvelopeError("bad magic")
            raise EnvelopeError("truncated file (header)")
        magic, version, raw_kind, n_records = _header.unpack(buf[:_header.size])
        if magic != MAGIC:
            raise EnvelopeError("bad magic")
        if version != FORMAT_VERSION:
            raise EnvelopeError(
                f"unsupported format version {version} (expected {FORMAT_VERSION})")
        try:
            file_kind = FileKind(raw_kind)
        except ValueError:
            raise EnvelopeError(f"unknown file kind {raw_kind!r}") from None
        if kind is not None and file_kind is not kind:
            raise EnvelopeError(
                f"expected a {kind.value.decode()} file, got {raw_kind.decode()}")

        pos = _header.size
        records = []
        for _ in range(n_records):
            rec, pos = Record.parse_data(buf, pos)
            records.append(rec)
        if pos != len(buf):
            raise EnvelopeError(f"{len(buf) - pos} unexpected bytes after last record")
        return cls(file_kind, records)

    def write(self, path):
        with open(path, 'wb') as f:
            f.write(self.serialise())

    @classmethod
    def read(cls, path, kind: Optional[FileKind] = None) -> 'Envelope':
        with open(path, 'rb') as f:
            return cls.from_buffer(f.read(), kind)
