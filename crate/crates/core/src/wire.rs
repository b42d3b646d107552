//! Wire contract for external cloze backends.
//!
//! Generation models are never linked in-core; they sit behind a
//! request/response string exchange over a local process (or any transport
//! that moves UTF-8 both ways):
//!
//! - request: the rendered input followed by one header line
//!   `SLOTS=<K> MODE=<FULL_SEQUENCE|SLOT_FILL>`;
//! - response: either `FULL:` followed by the regenerated sentence, or a
//!   `SLOTS:` line followed by exactly K lines, one fill per line.
//!
//! Placeholders `⟨Mk⟩`, the `⟨SEP⟩` line and the `"<unk>"` sentinel must be
//! matched byte-exactly on both sides. Prefilled slots are not representable
//! on the wire, so wire backends report `supports_prefill == false`.

use std::io::Write;
use std::process::{Command, Stdio};

use crate::backend::{check_request, BackendCapabilities, BackendError, BackendRequest, ClozeBackend};
use crate::mask::{align_template, split_rendered, CorrectionMode, FillResult};

/// Serializes a request for the wire.
pub fn encode_request(request: &BackendRequest) -> String {
    format!(
        "{}\nSLOTS={} MODE={}\n",
        request.rendered_input, request.slot_count, request.mode
    )
}

/// Parses a wire request back into its parts: rendered input, slot count,
/// mode.
pub fn parse_request(text: &str) -> Result<(String, usize, CorrectionMode), BackendError> {
    let trimmed = text.strip_suffix('\n').unwrap_or(text);
    let (rendered, header) = trimmed.rsplit_once('\n').ok_or_else(|| protocol(
        "request has no header line",
    ))?;
    let mut slots: Option<usize> = None;
    let mut mode: Option<CorrectionMode> = None;
    for field in header.split_whitespace() {
        if let Some(v) = field.strip_prefix("SLOTS=") {
            slots = v.parse().ok();
        } else if let Some(v) = field.strip_prefix("MODE=") {
            mode = v.parse().ok();
        }
    }
    match (slots, mode) {
        (Some(k), Some(m)) => Ok((rendered.to_string(), k, m)),
        _ => Err(protocol(&format!("malformed header line: {header:?}"))),
    }
}

/// A parsed wire response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireResponse {
    Full(String),
    Slots(Vec<String>),
}

/// Serializes a response for the wire.
pub fn encode_response(response: &WireResponse) -> String {
    match response {
        WireResponse::Full(sentence) => format!("FULL:{sentence}\n"),
        WireResponse::Slots(fills) => {
            let mut out = String::from("SLOTS:\n");
            for fill in fills {
                out.push_str(fill);
                out.push('\n');
            }
            out
        }
    }
}

/// Parses a wire response, enforcing the expected slot count for `SLOTS:`
/// responses.
pub fn parse_response(text: &str, expected_slots: usize) -> Result<WireResponse, BackendError> {
    if let Some(rest) = text.strip_prefix("FULL:") {
        let sentence = rest.strip_suffix('\n').unwrap_or(rest);
        return Ok(WireResponse::Full(sentence.to_string()));
    }
    if let Some(rest) = text.strip_prefix("SLOTS:") {
        let body = rest.strip_prefix('\n').unwrap_or(rest);
        let mut fills: Vec<String> = if body.is_empty() {
            Vec::new()
        } else {
            body.split('\n').map(str::to_string).collect()
        };
        // a terminating newline adds one empty artifact; drop it
        if body.ends_with('\n') {
            fills.pop();
        }
        if fills.len() != expected_slots {
            return Err(protocol(&format!(
                "SLOTS response carries {} fills, expected {}",
                fills.len(),
                expected_slots
            )));
        }
        return Ok(WireResponse::Slots(fills));
    }
    Err(protocol("response must start with FULL: or SLOTS:"))
}

fn protocol(message: &str) -> BackendError {
    BackendError::Protocol {
        message: message.to_string(),
    }
}

/// Runs an external command per request: the wire request is written to its
/// stdin, the wire response read from its stdout.
pub struct CommandBackend {
    program: String,
    args: Vec<String>,
    max_input_chars: usize,
}

impl CommandBackend {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        CommandBackend {
            program: program.into(),
            args,
            max_input_chars: usize::MAX,
        }
    }

    pub fn with_max_input_chars(mut self, max: usize) -> Self {
        self.max_input_chars = max;
        self
    }

    fn exchange(&self, request_text: &str) -> Result<String, BackendError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| BackendError::Transport {
                message: format!("failed to spawn {}: {e}", self.program),
                retryable: false,
            })?;
        child
            .stdin
            .take()
            .expect("stdin was piped")
            .write_all(request_text.as_bytes())
            .map_err(|e| BackendError::Transport {
                message: format!("failed to write request: {e}"),
                retryable: true,
            })?;
        let output = child.wait_with_output().map_err(|e| BackendError::Transport {
            message: format!("failed to read response: {e}"),
            retryable: true,
        })?;
        if !output.status.success() {
            return Err(BackendError::Transport {
                message: format!(
                    "backend command exited with {}: {}",
                    output.status,
                    String::from_utf8_lossy(&output.stderr).trim()
                ),
                retryable: false,
            });
        }
        String::from_utf8(output.stdout).map_err(|_| protocol("response is not valid UTF-8"))
    }
}

impl ClozeBackend for CommandBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_concurrent_calls: true,
            supports_prefill: false,
            max_input_chars: self.max_input_chars,
        }
    }

    fn fill(&self, request: &BackendRequest) -> Result<FillResult, BackendError> {
        check_request(request, &self.capabilities())?;
        let response_text = self.exchange(&encode_request(request))?;
        match parse_response(&response_text, request.slot_count)? {
            WireResponse::Slots(fills) => Ok(FillResult {
                raw_output: fills.join("\n"),
                fills,
                mode: CorrectionMode::SlotFill,
                alignment_ok: true,
            }),
            WireResponse::Full(sentence) => {
                let template = split_rendered(&request.rendered_input)
                    .map(|(_, t)| t.to_string())
                    .unwrap_or_else(|| request.rendered_input.clone());
                Ok(align_template(&template, &sentence))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trip() {
        let request = BackendRequest::new(
            "doc text\n⟨SEP⟩\n⟨M0⟩ died at ⟨M1⟩.".into(),
            2,
            CorrectionMode::SlotFill,
        );
        let encoded = encode_request(&request);
        assert!(encoded.ends_with("SLOTS=2 MODE=SLOT_FILL\n"));
        let (rendered, slots, mode) = parse_request(&encoded).unwrap();
        assert_eq!(rendered, request.rendered_input);
        assert_eq!(slots, 2);
        assert_eq!(mode, CorrectionMode::SlotFill);
    }

    #[test]
    fn response_round_trip_slots() {
        let response = WireResponse::Slots(vec!["Rod Temperton".into(), "".into(), "66".into()]);
        let encoded = encode_response(&response);
        assert_eq!(parse_response(&encoded, 3).unwrap(), response);
    }

    #[test]
    fn response_round_trip_full() {
        let response = WireResponse::Full("Rod Temperton has died.".into());
        let encoded = encode_response(&response);
        assert_eq!(encoded, "FULL:Rod Temperton has died.\n");
        assert_eq!(parse_response(&encoded, 0).unwrap(), response);
    }

    #[test]
    fn slot_count_mismatch_is_a_protocol_error() {
        let encoded = encode_response(&WireResponse::Slots(vec!["a".into()]));
        assert!(matches!(
            parse_response(&encoded, 2),
            Err(BackendError::Protocol { .. })
        ));
    }

    #[test]
    fn garbage_response_is_rejected() {
        assert!(parse_response("ANSWERS: a b c", 3).is_err());
    }
}
