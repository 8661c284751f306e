//! Workflow message codec and the checksum used by ring-buffer entries.
//!
//! A workflow message is the unit moved between pipeline stages: a fixed
//! 40-byte header followed by an opaque payload. The header layout is
//! normative (see `FORMATS.md`), all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       16    uid          128-bit request id, assigned once by a proxy
//! 16      8     accepted_at  tick the proxy accepted the request
//! 24      4     app_id       application (workflow) identifier
//! 28      2     stage        current stage index, increases per hop
//! 30      4     payload_len  payload byte count
//! 34      6     reserved     zero
//! ```

use alloc::vec::Vec;

/// Fixed encoded header size in bytes, independent of the payload.
pub const HEADER_LEN: usize = 40;

/// A message moving through a workflow: routing metadata plus opaque bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowMessage {
    /// Unique request id, assigned by the accepting proxy and carried
    /// unchanged through every stage.
    pub uid: u128,
    /// Tick at which the proxy accepted the originating request.
    pub accepted_at: u64,
    /// Application identifier; selects processing logic and routing.
    pub app_id: u32,
    /// Stage index the message is entering; strictly increases per hop.
    pub stage: u16,
    /// Opaque payload (client input or a stage's output).
    pub payload: Vec<u8>,
}

/// Codec failures surfaced by [`decode`] and [`encode`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("buffer of {0} bytes is shorter than the {HEADER_LEN}-byte header")]
    ShortHeader(usize),
    #[error("payload length field says {declared} but {actual} bytes follow the header")]
    LengthMismatch { declared: u32, actual: usize },
    #[error("payload of {0} bytes exceeds the u32 length field")]
    OversizePayload(usize),
}

/// Encodes a message as header + payload. Deterministic: equal messages
/// produce identical bytes.
pub fn encode(msg: &WorkflowMessage) -> Result<Vec<u8>, CodecError> {
    let len: u32 = msg
        .payload
        .len()
        .try_into()
        .map_err(|_| CodecError::OversizePayload(msg.payload.len()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + msg.payload.len());
    out.extend_from_slice(&msg.uid.to_le_bytes());
    out.extend_from_slice(&msg.accepted_at.to_le_bytes());
    out.extend_from_slice(&msg.app_id.to_le_bytes());
    out.extend_from_slice(&msg.stage.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&[0u8; 6]);
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

/// Decodes bytes produced by [`encode`]. The payload length field must match
/// the bytes actually present.
pub fn decode(bytes: &[u8]) -> Result<WorkflowMessage, CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::ShortHeader(bytes.len()));
    }
    let uid = u128::from_le_bytes(bytes[0..16].try_into().unwrap());
    let accepted_at = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let app_id = u32::from_le_bytes(bytes[24..28].try_into().unwrap());
    let stage = u16::from_le_bytes(bytes[28..30].try_into().unwrap());
    let declared = u32::from_le_bytes(bytes[30..34].try_into().unwrap());
    let actual = bytes.len() - HEADER_LEN;
    if declared as usize != actual {
        return Err(CodecError::LengthMismatch { declared, actual });
    }
    Ok(WorkflowMessage {
        uid,
        accepted_at,
        app_id,
        stage,
        payload: bytes[HEADER_LEN..].to_vec(),
    })
}

/// CRC-32 (IEEE polynomial, reflected) over the input. Stable across runs
/// and platforms; pinned by the standard "123456789" check value.
pub fn checksum(bytes: &[u8]) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(bytes);
    hasher.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> WorkflowMessage {
        WorkflowMessage {
            uid: 0x1234_5678_9abc_def0_0fed_cba9_8765_4321,
            accepted_at: 77,
            app_id: 3,
            stage: 2,
            payload: alloc::vec![9, 8, 7, 6, 5],
        }
    }

    #[test]
    fn empty_payload_encodes_to_header_only() {
        let msg = WorkflowMessage {
            payload: Vec::new(),
            ..sample()
        };
        assert_eq!(encode(&msg).unwrap().len(), HEADER_LEN);
    }

    #[test]
    fn round_trip_preserves_message() {
        let msg = sample();
        let bytes = encode(&msg).unwrap();
        assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(encode(&sample()).unwrap(), encode(&sample()).unwrap());
    }

    #[test]
    fn truncated_header_is_malformed() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(decode(&bytes[..HEADER_LEN - 1]), Err(CodecError::ShortHeader(39)));
    }

    #[test]
    fn length_field_must_match_buffer() {
        let mut bytes = encode(&sample()).unwrap();
        // Declare one more payload byte than is present.
        bytes[30..34].copy_from_slice(&6u32.to_le_bytes());
        assert_eq!(
            decode(&bytes),
            Err(CodecError::LengthMismatch { declared: 6, actual: 5 })
        );
        // Truncating the payload (but not the header) is also malformed.
        let bytes = encode(&sample()).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 2]),
            Err(CodecError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn checksum_of_empty_input_is_zero() {
        assert_eq!(checksum(&[]), 0x0000_0000);
    }

    #[test]
    fn checksum_matches_standard_check_value() {
        // CRC-32/ISO-HDLC check value for the ASCII string "123456789".
        assert_eq!(checksum(b"123456789"), 0xcbf4_3926);
    }

    #[test]
    fn any_single_bit_flip_changes_the_checksum() {
        let base: Vec<u8> = (0u8..64).collect();
        let reference = checksum(&base);
        for byte in 0..base.len() {
            for bit in 0..8 {
                let mut flipped = base.clone();
                flipped[byte] ^= 1 << bit;
                assert_ne!(checksum(&flipped), reference, "flip at {byte}:{bit}");
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_fuzz(
            uid in any::<u128>(),
            accepted_at in any::<u64>(),
            app_id in any::<u32>(),
            stage in any::<u16>(),
            payload in proptest::collection::vec(any::<u8>(), 0..512),
        ) {
            let msg = WorkflowMessage { uid, accepted_at, app_id, stage, payload };
            let bytes = encode(&msg).unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + msg.payload.len());
            prop_assert_eq!(decode(&bytes).unwrap(), msg);
        }
    }
}
