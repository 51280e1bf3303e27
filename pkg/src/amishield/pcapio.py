"""Classic pcap capture I/O and transport-payload extraction.

Reads and writes the classic (microsecond-resolution) pcap format
bit-exactly: 24-byte global header, 16-byte per-packet headers,
linktype 1 (Ethernet). Both byte orders are accepted on read;
nanosecond-resolution magics are rejected. Payload extraction
understands Ethernet II + IPv4 + TCP/UDP; anything else passes
through as protocol "other".

Per-flow reassembly concatenates payloads in timestamp order and
ignores TCP sequence numbers, which is adequate for duty-cycle scale
traffic but not for retransmitting streams.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

MAGIC_US = 0xA1B2C3D4
_MAGIC_NS = {b"\xa1\xb2\x3c\x4d", b"\x4d\x3c\xb2\xa1"}

_GLOBAL_HDR = struct.Struct("<IHHiIII")
_PKT_HDR = struct.Struct("<IIII")

ETHERTYPE_IPV4 = 0x0800
PROTO_TCP = 6
PROTO_UDP = 17


class PcapError(Exception):
    """Base class for capture parsing failures."""


class BadMagic(PcapError):
    """File does not start with a supported pcap magic number."""


class Truncated(PcapError):
    """A per-packet header promises more bytes than the file holds."""


class MalformedHeader(PcapError):
    """IP/transport header fields are inconsistent with the captured length."""


class IoFailure(PcapError):
    """Underlying OS error while writing a capture."""


@dataclass(frozen=True)
class PacketRecord:
    """One captured frame with its record header fields."""

    ts_sec: int
    ts_usec: int
    data: bytes
    orig_len: int = -1

    def __post_init__(self):
        if self.orig_len < 0:
            object.__setattr__(self, "orig_len", len(self.data))
        if self.orig_len < len(self.data):
            raise ValueError("original length smaller than captured length")

    @property
    def captured_len(self) -> int:
        return len(self.data)

    @property
    def timestamp(self) -> float:
        return self.ts_sec + self.ts_usec / 1e6


@dataclass(frozen=True)
class ByteSample:
    """A payload extracted from one packet or one reassembled flow."""

    payload: bytes
    source_id: str
    protocol: str = "other"  # tcp | udp | other
    label: str | None = None  # normal | malware | None


def read_capture(path) -> list[PacketRecord]:
    """Parse a classic pcap file into its packet records, in file order.

    Raises BadMagic for unrecognized (or nanosecond) magics and
    Truncated when the file ends mid-record.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise BadMagic("file shorter than a pcap magic number")
    magic = raw[:4]
    if magic == b"\xd4\xc3\xb2\xa1":
        endian = "<"
    elif magic == b"\xa1\xb2\xc3\xd4":
        endian = ">"
    elif magic in _MAGIC_NS:
        raise BadMagic("nanosecond-resolution captures are not supported")
    else:
        raise BadMagic(f"not a pcap file (magic {magic.hex()})")
    if len(raw) < 24:
        raise Truncated("file shorter than the 24-byte global header")

    pkt_hdr = struct.Struct(endian + "IIII")
    records = []
    off = 24
    n = len(raw)
    while off < n:
        if off + 16 > n:
            raise Truncated("incomplete per-packet header at end of file")
        ts_sec, ts_usec, incl_len, orig_len = pkt_hdr.unpack_from(raw, off)
        off += 16
        if off + incl_len > n:
            raise Truncated(
                f"packet header promises {incl_len} bytes, {n - off} remain"
            )
        records.append(
            PacketRecord(ts_sec, ts_usec, raw[off : off + incl_len], orig_len)
        )
        off += incl_len
    return records


def write_capture(packets, path) -> None:
    """Write records as a little-endian classic pcap file (linktype 1)."""
    try:
        with open(path, "wb") as fh:
            fh.write(_GLOBAL_HDR.pack(MAGIC_US, 2, 4, 0, 0, 65535, 1))
            for rec in packets:
                fh.write(
                    _PKT_HDR.pack(rec.ts_sec, rec.ts_usec, len(rec.data), rec.orig_len)
                )
                fh.write(rec.data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _ipv4_str(b: bytes) -> str:
    return ".".join(str(x) for x in b)


@dataclass(frozen=True)
class _Parsed:
    protocol: str
    payload: bytes
    flow_key: tuple | None


def _parse_frame(data: bytes) -> _Parsed:
    if len(data) < 14:
        raise MalformedHeader("frame shorter than an Ethernet header")
    ethertype = int.from_bytes(data[12:14], "big")
    if ethertype != ETHERTYPE_IPV4:
        return _Parsed("other", data[14:], None)

    if len(data) < 34:
        raise MalformedHeader("IPv4 frame shorter than a minimal IP header")
    ihl = (data[14] & 0x0F) * 4
    if ihl < 20 or 14 + ihl > len(data):
        raise MalformedHeader("bad IPv4 header length")
    total_len = int.from_bytes(data[16:18], "big")
    if total_len < ihl or 14 + total_len > len(data):
        raise MalformedHeader("IPv4 total length exceeds captured bytes")
    proto = data[23]
    src = _ipv4_str(data[26:30])
    dst = _ipv4_str(data[30:34])
    ip_payload_end = 14 + total_len
    t_off = 14 + ihl

    if proto == PROTO_TCP:
        if t_off + 20 > ip_payload_end:
            raise MalformedHeader("TCP header overruns IP payload")
        sport = int.from_bytes(data[t_off : t_off + 2], "big")
        dport = int.from_bytes(data[t_off + 2 : t_off + 4], "big")
        doff = (data[t_off + 12] >> 4) * 4
        if doff < 20 or t_off + doff > ip_payload_end:
            raise MalformedHeader("bad TCP data offset")
        return _Parsed(
            "tcp", data[t_off + doff : ip_payload_end], (src, dst, sport, dport, "tcp")
        )
    if proto == PROTO_UDP:
        if t_off + 8 > ip_payload_end:
            raise MalformedHeader("UDP header overruns IP payload")
        sport = int.from_bytes(data[t_off : t_off + 2], "big")
        dport = int.from_bytes(data[t_off + 2 : t_off + 4], "big")
        ulen = int.from_bytes(data[t_off + 4 : t_off + 6], "big")
        if ulen < 8 or t_off + ulen > ip_payload_end:
            raise MalformedHeader("bad UDP length field")
        return _Parsed(
            "udp", data[t_off + 8 : t_off + ulen], (src, dst, sport, dport, "udp")
        )
    return _Parsed("other", data[t_off:ip_payload_end], (src, dst, None, None, proto))


def extract_payloads(packets, policy: str = "per-packet") -> list[ByteSample]:
    """Extract transport payloads from parsed frames.

    per-packet: one ByteSample per packet (TCP/UDP payload; non-TCP/UDP
    traffic passes through whole as protocol "other").
    per-flow: payloads sharing a (src, dst, sport, dport, proto) 5-tuple
    are concatenated in timestamp order into a single sample.
    """
    if policy not in ("per-packet", "per-flow"):
        raise ValueError(f"unknown extraction policy {policy!r}")

    parsed = [(i, rec, _parse_frame(rec.data)) for i, rec in enumerate(packets)]
    if policy == "per-packet":
        return [
            ByteSample(p.payload, f"pkt:{i}", p.protocol) for i, _rec, p in parsed
        ]

    flows: OrderedDict[tuple, list] = OrderedDict()
    for i, rec, p in parsed:
        key = p.flow_key if p.flow_key is not None else ("", "", None, None, f"raw{i}")
        flows.setdefault(key, []).append((rec.ts_sec, rec.ts_usec, i, p))
    samples = []
    for key, items in flows.items():
        items.sort(key=lambda t: (t[0], t[1], t[2]))
        payload = b"".join(p.payload for _, _, _, p in items)
        proto = items[0][3].protocol
        src, dst, sport, dport, _ = key
        if sport is not None:
            sid = f"{proto}:{src}:{sport}->{dst}:{dport}"
        elif src:
            sid = f"{proto}:{src}->{dst}"
        else:
            sid = f"pkt:{items[0][2]}"
        samples.append(ByteSample(payload, sid, proto))
    return samples


def _ipv4_checksum(header: bytes) -> int:
    s = sum(int.from_bytes(header[i : i + 2], "big") for i in range(0, len(header), 2))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def build_udp_frame(
    src_ip: str,
    dst_ip: str,
    sport: int,
    dport: int,
    payload: bytes,
    pad_to: int = 60,
) -> bytes:
    """Assemble an Ethernet II / IPv4 / UDP frame around a payload.

    Frames shorter than pad_to (default: the 60-byte Ethernet minimum)
    are zero-padded; the length headers let extract_payloads strip the
    padding again.
    """
    udp = struct.pack(">HHHH", sport, dport, 8 + len(payload), 0) + payload
    total = 20 + len(udp)
    src = bytes(int(x) for x in src_ip.split("."))
    dst = bytes(int(x) for x in dst_ip.split("."))
    ip_hdr = struct.pack(">BBHHHBBH", 0x45, 0, total, 0, 0, 64, PROTO_UDP, 0) + src + dst
    ip_hdr = ip_hdr[:10] + struct.pack(">H", _ipv4_checksum(ip_hdr)) + ip_hdr[12:]
    eth = b"\x02" * 6 + b"\x04" * 6 + struct.pack(">H", ETHERTYPE_IPV4)
    frame = eth + ip_hdr + udp
    if len(frame) < pad_to:
        frame += b"\x00" * (pad_to - len(frame))
    return frame
