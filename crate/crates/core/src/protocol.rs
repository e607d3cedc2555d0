//! Agent-to-aggregator datagram format.
//!
//! Every datagram is big-endian and starts with a fixed header:
//!
//! ```text
//! magic[4]='C2MS' | version:u8 | kind:u8 | hostname_len:u8 | hostname | timestamp:u64
//! ```
//!
//! Metric datagrams (kind 1) append
//!
//! ```text
//! name_len:u8 | name | value:f64 | units_len:u8 | units | slope:u8
//! ```
//!
//! A datagram never exceeds [`MAX_DATAGRAM`] bytes and carries exactly one metric.

use byteorder::{BigEndian, ByteOrder};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"C2MS";
pub const VERSION: u8 = 1;
pub const MAX_DATAGRAM: usize = 512;
pub const MAX_HOSTNAME: usize = 255;
pub const MAX_METRIC_NAME: usize = 127;
pub const MAX_UNITS: usize = 31;

const KIND_HEARTBEAT: u8 = 0;
const KIND_METRIC: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("encoded datagram would be {0} bytes, limit is {MAX_DATAGRAM}")]
    Oversize(usize),
    #[error("invalid datagram field: {0}")]
    Invariant(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed datagram: {0}")]
pub struct MalformedError(pub &'static str);

/// Gauge vs counter semantics of a metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Slope {
    Zero,
    Positive,
    Both,
}

impl Slope {
    fn to_wire(self) -> u8 {
        match self {
            Slope::Zero => 0,
            Slope::Positive => 1,
            Slope::Both => 2,
        }
    }

    fn from_wire(b: u8) -> Option<Self> {
        match b {
            0 => Some(Slope::Zero),
            1 => Some(Slope::Positive),
            2 => Some(Slope::Both),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricPayload {
    pub name: String,
    pub value: f64,
    pub units: String,
    pub slope: Slope,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Heartbeat,
    Metric(MetricPayload),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datagram {
    pub hostname: String,
    pub timestamp: u64,
    pub payload: Payload,
}

impl Datagram {
    pub fn heartbeat(hostname: impl Into<String>, timestamp: u64) -> Self {
        Datagram { hostname: hostname.into(), timestamp, payload: Payload::Heartbeat }
    }

    pub fn metric(
        hostname: impl Into<String>,
        timestamp: u64,
        name: impl Into<String>,
        value: f64,
        units: impl Into<String>,
        slope: Slope,
    ) -> Self {
        Datagram {
            hostname: hostname.into(),
            timestamp,
            payload: Payload::Metric(MetricPayload { name: name.into(), value, units: units.into(), slope }),
        }
    }

    pub fn encoded_len(&self) -> usize {
        let header = 4 + 1 + 1 + 1 + self.hostname.len() + 8;
        match &self.payload {
            Payload::Heartbeat => header,
            Payload::Metric(m) => header + 1 + m.name.len() + 8 + 1 + m.units.len() + 1,
        }
    }
}

/// One observation of one metric on one host.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSample {
    pub hostname: String,
    pub name: String,
    pub value: f64,
    pub units: String,
    pub slope: Slope,
    pub timestamp: u64,
}

impl MetricSample {
    pub fn to_datagram(&self) -> Datagram {
        Datagram::metric(&*self.hostname, self.timestamp, &*self.name, self.value, &*self.units, self.slope)
    }
}

/// Hostnames: non-empty, no whitespace, no control characters.
pub fn valid_hostname(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

/// Metric names: `[a-z0-9_]+`.
pub fn valid_metric_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

pub fn encode(d: &Datagram) -> Result<Vec<u8>, EncodeError> {
    if d.hostname.len() > MAX_HOSTNAME {
        return Err(EncodeError::Oversize(d.encoded_len()));
    }
    if !valid_hostname(&d.hostname) {
        return Err(EncodeError::Invariant(format!("hostname {:?}", d.hostname)));
    }
    if let Payload::Metric(m) = &d.payload {
        if m.name.len() > MAX_METRIC_NAME || m.units.len() > MAX_UNITS {
            return Err(EncodeError::Oversize(d.encoded_len()));
        }
        if !valid_metric_name(&m.name) {
            return Err(EncodeError::Invariant(format!("metric name {:?}", m.name)));
        }
        if !m.value.is_finite() {
            return Err(EncodeError::Invariant(format!("non-finite value for {}", m.name)));
        }
    }
    let len = d.encoded_len();
    if len > MAX_DATAGRAM {
        return Err(EncodeError::Oversize(len));
    }

    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(match d.payload {
        Payload::Heartbeat => KIND_HEARTBEAT,
        Payload::Metric(_) => KIND_METRIC,
    });
    out.push(d.hostname.len() as u8);
    out.extend_from_slice(d.hostname.as_bytes());
    let mut buf = [0u8; 8];
    BigEndian::write_u64(&mut buf, d.timestamp);
    out.extend_from_slice(&buf);
    if let Payload::Metric(m) = &d.payload {
        out.push(m.name.len() as u8);
        out.extend_from_slice(m.name.as_bytes());
        BigEndian::write_f64(&mut buf, m.value);
        out.extend_from_slice(&buf);
        out.push(m.units.len() as u8);
        out.extend_from_slice(m.units.as_bytes());
        out.push(m.slope.to_wire());
    }
    debug_assert_eq!(out.len(), len);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MalformedError> {
        if self.buf.len() < n {
            return Err(MalformedError("truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, MalformedError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, MalformedError> {
        Ok(BigEndian::read_u64(self.take(8)?))
    }

    fn f64(&mut self) -> Result<f64, MalformedError> {
        Ok(BigEndian::read_f64(self.take(8)?))
    }

    fn string(&mut self) -> Result<&'a str, MalformedError> {
        let n = self.u8()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| MalformedError("invalid utf-8"))
    }
}

/// Decodes one datagram. Total over arbitrary input: anything that is not a
/// valid encoding yields [`MalformedError`].
pub fn decode(bytes: &[u8]) -> Result<Datagram, MalformedError> {
    if bytes.len() > MAX_DATAGRAM {
        return Err(MalformedError("oversize"));
    }
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(MalformedError("bad magic"));
    }
    if r.u8()? != VERSION {
        return Err(MalformedError("unsupported version"));
    }
    let kind = r.u8()?;
    let hostname = r.string()?;
    if !valid_hostname(hostname) {
        return Err(MalformedError("invalid hostname"));
    }
    let timestamp = r.u64()?;
    let payload = match kind {
        KIND_HEARTBEAT => Payload::Heartbeat,
        KIND_METRIC => {
            let name = r.string()?;
            if name.len() > MAX_METRIC_NAME || !valid_metric_name(name) {
                return Err(MalformedError("invalid metric name"));
            }
            let value = r.f64()?;
            if !value.is_finite() {
                return Err(MalformedError("non-finite value"));
            }
            let units = r.string()?;
            if units.len() > MAX_UNITS {
                return Err(MalformedError("units too long"));
            }
            let slope = Slope::from_wire(r.u8()?).ok_or(MalformedError("bad slope"))?;
            Payload::Metric(MetricPayload { name: name.to_owned(), value, units: units.to_owned(), slope })
        }
        _ => return Err(MalformedError("unknown kind")),
    };
    if !r.buf.is_empty() {
        return Err(MalformedError("trailing bytes"));
    }
    Ok(Datagram { hostname: hostname.to_owned(), timestamp, payload })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn heartbeat_header_layout() {
        let bytes = encode(&Datagram::heartbeat("node01", 1_700_000_000)).unwrap();
        assert_eq!(&bytes[..6], &[0x43, 0x32, 0x4D, 0x53, 0x01, 0x00]);
        assert_eq!(bytes[6], 6);
        assert_eq!(&bytes[7..13], b"node01");
        assert_eq!(&bytes[13..], &1_700_000_000u64.to_be_bytes());
    }

    #[test]
    fn metric_round_trip() {
        let d = Datagram::metric("node01", 1_700_000_000, "cpu_user", 12.5, "%", Slope::Both);
        let bytes = encode(&d).unwrap();
        assert_eq!(bytes[5], 1);
        assert_eq!(decode(&bytes).unwrap(), d);
    }

    #[test]
    fn long_hostname_is_oversize() {
        let d = Datagram::metric("h".repeat(300), 1, "cpu_user", 1.0, "%", Slope::Both);
        assert!(matches!(encode(&d), Err(EncodeError::Oversize(_))));
    }

    #[test]
    fn invariant_violations() {
        assert!(matches!(encode(&Datagram::heartbeat("", 1)), Err(EncodeError::Invariant(_))));
        assert!(matches!(encode(&Datagram::heartbeat("a b", 1)), Err(EncodeError::Invariant(_))));
        let bad_name = Datagram::metric("n", 1, "CPU", 1.0, "", Slope::Zero);
        assert!(matches!(encode(&bad_name), Err(EncodeError::Invariant(_))));
        let nan = Datagram::metric("n", 1, "cpu", f64::NAN, "", Slope::Zero);
        assert!(matches!(encode(&nan), Err(EncodeError::Invariant(_))));
        let long_units = Datagram::metric("n", 1, "cpu", 1.0, "u".repeat(32), Slope::Zero);
        assert!(matches!(encode(&long_units), Err(EncodeError::Oversize(_))));
    }

    #[test]
    fn malformed_inputs() {
        assert_eq!(decode(&[]), Err(MalformedError("truncated")));
        assert_eq!(decode(b"XXXX\x01\x00\x01a"), Err(MalformedError("bad magic")));
        let mut hb = encode(&Datagram::heartbeat("a", 1)).unwrap();
        hb[4] = 2;
        assert_eq!(decode(&hb), Err(MalformedError("unsupported version")));

        let d = Datagram::metric("node", 5, "x", 1.0, "B", Slope::Positive);
        let mut bytes = encode(&d).unwrap();
        // value sits right after name_len + name
        let value_at = 4 + 1 + 1 + 1 + 4 + 8 + 1 + 1;
        bytes[value_at..value_at + 8].copy_from_slice(&f64::NAN.to_be_bytes());
        assert_eq!(decode(&bytes), Err(MalformedError("non-finite value")));

        let ok = encode(&d).unwrap();
        assert!(decode(&ok[..ok.len() - 1]).is_err());
        let mut extra = ok.clone();
        extra.push(0);
        assert_eq!(decode(&extra), Err(MalformedError("trailing bytes")));
    }

    #[test]
    fn encode_is_deterministic() {
        let d = Datagram::metric("n1", 42, "bytes_in", 1e6, "B/s", Slope::Positive);
        assert_eq!(encode(&d).unwrap(), encode(&d).unwrap());
    }

    proptest! {
        #[test]
        fn decode_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..600)) {
            if let Ok(d) = decode(&bytes) {
                prop_assert!(valid_hostname(&d.hostname));
                prop_assert_eq!(encode(&d).unwrap(), bytes);
            }
        }
    }
}
