//! Fixed-size binary frame used on the device link.
//!
//! Little-endian layout:
//!
//! | offset | size | field                       |
//! |--------|------|-----------------------------|
//! | 0      | 1    | magic `0xE7`                |
//! | 1      | 1    | version `0x01`              |
//! | 2      | 4    | seq (u32)                   |
//! | 6      | 4    | t_ms (u32)                  |
//! | 10     | 6    | codes (3 × i16)             |
//! | 16     | 1    | status flags                |
//! | 17     | 1    | CRC-8/SMBUS over bytes 0..17 |

use crate::error::FrameError;
use crate::record::AcquisitionFrame;

pub const FRAME_MAGIC: u8 = 0xE7;
pub const FRAME_VERSION: u8 = 0x01;
pub const FRAME_LEN: usize = 18;
const CRC_OFFSET: usize = FRAME_LEN - 1;

const CRC8_TABLE: [u8; 256] = {
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x80 != 0 {
                (crc << 1) ^ 0x07
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
};

/// CRC-8/SMBUS: poly 0x07, init 0x00, no reflection, no final xor.
pub fn crc8_smbus(data: &[u8]) -> u8 {
    data.iter().fold(0u8, |crc, &b| CRC8_TABLE[usize::from(crc ^ b)])
}

pub fn encode_frame(f: &AcquisitionFrame) -> [u8; FRAME_LEN] {
    let mut out = [0u8; FRAME_LEN];
    out[0] = FRAME_MAGIC;
    out[1] = FRAME_VERSION;
    out[2..6].copy_from_slice(&f.seq.to_le_bytes());
    out[6..10].copy_from_slice(&f.t_ms.to_le_bytes());
    for (k, code) in f.codes.iter().enumerate() {
        out[10 + 2 * k..12 + 2 * k].copy_from_slice(&code.to_le_bytes());
    }
    out[16] = f.status;
    out[CRC_OFFSET] = crc8_smbus(&out[..CRC_OFFSET]);
    out
}

/// Decodes one frame. Checks run in order: length, magic, version, CRC.
pub fn decode_frame(bytes: &[u8]) -> Result<AcquisitionFrame, FrameError> {
    if bytes.len() != FRAME_LEN {
        return Err(FrameError::Length {
            expected: FRAME_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[0] != FRAME_MAGIC {
        return Err(FrameError::BadMagic(bytes[0]));
    }
    if bytes[1] != FRAME_VERSION {
        return Err(FrameError::UnsupportedVersion(bytes[1]));
    }
    let computed = crc8_smbus(&bytes[..CRC_OFFSET]);
    if computed != bytes[CRC_OFFSET] {
        return Err(FrameError::CrcMismatch {
            carried: bytes[CRC_OFFSET],
            computed,
        });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let i16_at = |i: usize| i16::from_le_bytes(bytes[i..i + 2].try_into().unwrap());
    Ok(AcquisitionFrame {
        seq: u32_at(2),
        t_ms: u32_at(6),
        codes: [i16_at(10), i16_at(12), i16_at(14)],
        status: bytes[16],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bit-at-a-time reference, independent of the table.
    fn crc8_bitwise(data: &[u8]) -> u8 {
        let mut crc = 0u8;
        for &b in data {
            crc ^= b;
            for _ in 0..8 {
                crc = if crc & 0x80 != 0 {
                    (crc << 1) ^ 0x07
                } else {
                    crc << 1
                };
            }
        }
        crc
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc8_smbus(b"123456789"), 0xF4);
        assert_eq!(crc8_bitwise(b"123456789"), 0xF4);
    }

    #[test]
    fn table_matches_bitwise() {
        for b in 0..=255u8 {
            assert_eq!(crc8_smbus(&[b, 0x5A, b]), crc8_bitwise(&[b, 0x5A, b]));
        }
    }

    #[test]
    fn zero_frame_bytes() {
        let f = AcquisitionFrame {
            seq: 0,
            t_ms: 0,
            codes: [0; 3],
            status: 0,
        };
        let mut expected = [0u8; FRAME_LEN];
        expected[0] = 0xE7;
        expected[1] = 0x01;
        expected[17] = 0x73;
        assert_eq!(encode_frame(&f), expected);
        assert_eq!(crc8_bitwise(&expected[..17]), 0x73);
    }

    #[test]
    fn mixed_frame_bytes() {
        let f = AcquisitionFrame {
            seq: 7,
            t_ms: 3500,
            codes: [16, -16, i16::MAX],
            status: 3,
        };
        let bytes = encode_frame(&f);
        assert_eq!(hex::encode(&bytes[..17]), "e70107000000ac0d00001000f0ffff7f03");
        assert_eq!(bytes[17], 0x7F);
        assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn distinct_error_kinds() {
        let good = encode_frame(&AcquisitionFrame {
            seq: 1,
            t_ms: 500,
            codes: [1, 2, 3],
            status: 0,
        });

        assert!(matches!(
            decode_frame(&good[..16]),
            Err(FrameError::Length {
                expected: 18,
                actual: 16
            })
        ));

        let mut b = good;
        b[0] = 0x00;
        assert_eq!(decode_frame(&b), Err(FrameError::BadMagic(0x00)));

        let mut b = good;
        b[1] = 0x02;
        assert_eq!(decode_frame(&b), Err(FrameError::UnsupportedVersion(0x02)));

        let mut b = good;
        b[17] ^= 0xFF;
        assert!(matches!(decode_frame(&b), Err(FrameError::CrcMismatch { .. })));
    }
}
