//! Incremental parser for `text/event-stream` bodies.

/// Accumulates raw bytes and yields the `data` payload of each complete
/// event. Comment lines and non-data fields are ignored; multi-line data is
/// joined with `\n` as the event-stream format prescribes.
#[derive(Debug, Default)]
pub struct SseParser {
    buf: Vec<u8>,
    data: Option<String>,
}

impl SseParser {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feed a chunk of the body, returning every event it completes.
    pub fn push(&mut self, bytes: &[u8]) -> Vec<String> {
        self.buf.extend_from_slice(bytes);
        let mut events = Vec::new();
        while let Some(nl) = self.buf.iter().position(|&b| b == b'\n') {
            let mut line: Vec<u8> = self.buf.drain(..=nl).collect();
            line.pop();
            if line.last() == Some(&b'\r') {
                line.pop();
            }
            let line = String::from_utf8_lossy(&line);
            if line.is_empty() {
                if let Some(data) = self.data.take() {
                    events.push(data);
                }
                continue;
            }
            if line.starts_with(':') {
                continue;
            }
            let (field, value) = match line.split_once(':') {
                Some((f, v)) => (f, v.strip_prefix(' ').unwrap_or(v)),
                None => (line.as_ref(), ""),
            };
            if field == "data" {
                match &mut self.data {
                    Some(d) => {
                        d.push('\n');
                        d.push_str(value);
                    }
                    None => self.data = Some(value.to_owned()),
                }
            }
        }
        events
    }

    /// Bytes received after the last complete line; non-empty at stream end
    /// means the stream was cut mid-frame.
    pub fn has_partial(&self) -> bool {
        !self.buf.is_empty() || self.data.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_split_across_chunks() {
        let mut p = SseParser::new();
        assert!(p.push(b"data: {\"a\"").is_empty());
        assert!(p.has_partial());
        assert_eq!(p.push(b":1}\n\ndata: [DONE]\n\n"), ["{\"a\":1}", "[DONE]"]);
        assert!(!p.has_partial());
    }

    #[test]
    fn crlf_comments_and_multiline() {
        let mut p = SseParser::new();
        let got = p.push(b": keep-alive\r\n\r\nevent: x\r\ndata: one\r\ndata:two\r\n\r\n");
        assert_eq!(got, ["one\ntwo"]);
    }

    #[test]
    fn blank_lines_without_data_are_ignored() {
        let mut p = SseParser::new();
        assert!(p.push(b"\n\n\n").is_empty());
    }
}
