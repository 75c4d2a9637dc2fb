//! RESP2 framing.

use std::io::{self, BufRead, Write};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RespValue {
    Simple(String),
    Error(String),
    Integer(i64),
    Bulk(Option<Vec<u8>>),
    Array(Option<Vec<RespValue>>),
}

impl RespValue {
    pub fn ok() -> Self {
        RespValue::Simple("OK".into())
    }

    pub fn nil() -> Self {
        RespValue::Bulk(None)
    }

    pub fn bulk(bytes: impl Into<Vec<u8>>) -> Self {
        RespValue::Bulk(Some(bytes.into()))
    }

    pub fn is_nil(&self) -> bool {
        matches!(self, RespValue::Bulk(None) | RespValue::Array(None))
    }

    pub fn into_bytes(self) -> Option<Vec<u8>> {
        match self {
            RespValue::Bulk(b) => b,
            RespValue::Simple(s) => Some(s.into_bytes()),
            _ => None,
        }
    }

    pub fn as_integer(&self) -> Option<i64> {
        match self {
            RespValue::Integer(n) => Some(*n),
            _ => None,
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> io::Result<()> {
        match self {
            RespValue::Simple(s) => write!(out, "+{s}\r\n"),
            RespValue::Error(s) => write!(out, "-{s}\r\n"),
            RespValue::Integer(n) => write!(out, ":{n}\r\n"),
            RespValue::Bulk(None) => out.write_all(b"$-1\r\n"),
            RespValue::Bulk(Some(b)) => {
                write!(out, "${}\r\n", b.len())?;
                out.write_all(b)?;
                out.write_all(b"\r\n")
            }
            RespValue::Array(None) => out.write_all(b"*-1\r\n"),
            RespValue::Array(Some(items)) => {
                write!(out, "*{}\r\n", items.len())?;
                items.iter().try_for_each(|item| item.write_to(out))
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

/// Encodes a command as an array of bulk strings.
pub fn write_command(out: &mut impl Write, args: &[&[u8]]) -> io::Result<()> {
    write!(out, "*{}\r\n", args.len())?;
    for arg in args {
        write!(out, "${}\r\n", arg.len())?;
        out.write_all(arg)?;
        out.write_all(b"\r\n")?;
    }
    Ok(())
}

const MAX_BULK: usize = 512 * 1024 * 1024;
const MAX_DEPTH: usize = 32;

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_line(input: &mut impl BufRead) -> io::Result<String> {
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    if line.is_empty() {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"));
    }
    if !line.ends_with(b"\r\n") {
        return Err(bad("line not terminated by CRLF"));
    }
    line.truncate(line.len() - 2);
    String::from_utf8(line).map_err(|_| bad("non UTF-8 line"))
}

fn parse_len(text: &str) -> io::Result<Option<usize>> {
    let n: i64 = text.parse().map_err(|_| bad(format!("bad length {text:?}")))?;
    match n {
        -1 => Ok(None),
        n if n < -1 => Err(bad(format!("bad length {n}"))),
        n => Ok(Some(n as usize)),
    }
}

/// Reads one value. Returns `UnexpectedEof` if the peer closed the stream
/// before a value started.
pub fn read_value(input: &mut impl BufRead) -> io::Result<RespValue> {
    read_nested(input, 0)
}

fn read_nested(input: &mut impl BufRead, depth: usize) -> io::Result<RespValue> {
    if depth > MAX_DEPTH {
        return Err(bad("nesting too deep"));
    }
    let line = read_line(input)?;
    let (tag, rest) = line.split_at(line.chars().next().map_or(0, char::len_utf8));
    match tag {
        "+" => Ok(RespValue::Simple(rest.to_owned())),
        "-" => Ok(RespValue::Error(rest.to_owned())),
        ":" => rest.parse().map(RespValue::Integer).map_err(|_| bad(format!("bad integer {rest:?}"))),
        "$" => match parse_len(rest)? {
            None => Ok(RespValue::Bulk(None)),
            Some(n) if n > MAX_BULK => Err(bad("bulk string too large")),
            Some(n) => {
                let mut buf = vec![0; n + 2];
                input.read_exact(&mut buf)?;
                if !buf.ends_with(b"\r\n") {
                    return Err(bad("bulk string not terminated by CRLF"));
                }
                buf.truncate(n);
                Ok(RespValue::Bulk(Some(buf)))
            }
        },
        "*" => match parse_len(rest)? {
            None => Ok(RespValue::Array(None)),
            Some(n) => {
                let mut items = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    items.push(read_nested(input, depth + 1)?);
                }
                Ok(RespValue::Array(Some(items)))
            }
        },
        _ => Err(bad(format!("unknown RESP type in {line:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn decodes_reference_frames() {
        let mut input = Cursor::new(b"+OK\r\n-ERR no\r\n:42\r\n$3\r\nfoo\r\n$-1\r\n*2\r\n$1\r\na\r\n:1\r\n*-1\r\n".to_vec());
        assert_eq!(read_value(&mut input).unwrap(), RespValue::ok());
        assert_eq!(read_value(&mut input).unwrap(), RespValue::Error("ERR no".into()));
        assert_eq!(read_value(&mut input).unwrap(), RespValue::Integer(42));
        assert_eq!(read_value(&mut input).unwrap(), RespValue::bulk("foo"));
        assert_eq!(read_value(&mut input).unwrap(), RespValue::nil());
        assert_eq!(
            read_value(&mut input).unwrap(),
            RespValue::Array(Some(vec![RespValue::bulk("a"), RespValue::Integer(1)]))
        );
        assert_eq!(read_value(&mut input).unwrap(), RespValue::Array(None));
        assert_eq!(read_value(&mut input).unwrap_err().kind(), io::ErrorKind::UnexpectedEof);
    }

    #[test]
    fn command_encoding() {
        let mut out = Vec::new();
        write_command(&mut out, &[b"SET", b"k", b"v"]).unwrap();
        assert_eq!(out, b"*3\r\n$3\r\nSET\r\n$1\r\nk\r\n$1\r\nv\r\n");
    }

    #[test]
    fn rejects_garbage() {
        for frame in [&b"?x\r\n"[..], b"$3\r\nab\r\n", b":x\r\n", b"$-2\r\n", b"+no-crlf\n"] {
            assert!(read_value(&mut Cursor::new(frame.to_vec())).is_err(), "{frame:?}");
        }
    }

    fn value() -> impl Strategy<Value = RespValue> {
        let leaf = prop_oneof![
            "[a-zA-Z0-9 ]{0,12}".prop_map(RespValue::Simple),
            "[a-zA-Z0-9 ]{0,12}".prop_map(RespValue::Error),
            any::<i64>().prop_map(RespValue::Integer),
            proptest::option::of(proptest::collection::vec(any::<u8>(), 0..40)).prop_map(RespValue::Bulk),
        ];
        leaf.prop_recursive(3, 32, 5, |inner| {
            proptest::option::of(proptest::collection::vec(inner, 0..5)).prop_map(RespValue::Array)
        })
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(v in value()) {
            let bytes = v.encode();
            prop_assert_eq!(read_value(&mut Cursor::new(bytes)).unwrap(), v);
        }
    }
}
