use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One layer's choice. The derived order is the enumeration order:
/// convolution before attention, lower index first, stride 1 before 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gene {
    Conv { index: u8, stride: u8 },
    Attention { index: u8, stride: u8 },
    MbConv { index: u8 },
    Width { index: u8 },
}

impl Gene {
    pub fn stride(self) -> Option<u8> {
        match self {
            Gene::Conv { stride, .. } | Gene::Attention { stride, .. } => Some(stride),
            _ => None,
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Gene::Conv { index, .. }
            | Gene::Attention { index, .. }
            | Gene::MbConv { index }
            | Gene::Width { index } => index,
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Gene::Attention { .. })
    }
}

impl fmt::Display for Gene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Gene::Conv { index, stride } => write!(f, "c{index}s{stride}"),
            Gene::Attention { index, stride } => write!(f, "a{index}s{stride}"),
            Gene::MbConv { index } => write!(f, "m{index}"),
            Gene::Width { index } => write!(f, "w{index}"),
        }
    }
}

fn malformed(token: &str, why: &str) -> Error {
    Error::Architecture {
        position: format!("token `{token}`"),
        reason: why.to_string(),
    }
}

fn parse_u8(token: &str, digits: &str) -> Result<u8> {
    if digits.is_empty()
        || !digits.bytes().all(|b| b.is_ascii_digit())
        || (digits.len() > 1 && digits.starts_with('0'))
    {
        return Err(malformed(token, "expected a decimal index"));
    }
    digits
        .parse()
        .map_err(|_| malformed(token, "index out of range"))
}

impl FromStr for Gene {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        let mut chars = token.chars();
        let letter = chars.next().ok_or_else(|| malformed(token, "empty gene"))?;
        let rest = chars.as_str();
        match letter {
            'c' | 'a' => {
                let (idx, stride) = rest
                    .split_once('s')
                    .ok_or_else(|| malformed(token, "operator genes need an `s` stride suffix"))?;
                let index = parse_u8(token, idx)?;
                let stride = parse_u8(token, stride)?;
                if stride != 1 && stride != 2 {
                    return Err(malformed(token, "stride must be 1 or 2"));
                }
                Ok(if letter == 'c' {
                    Gene::Conv { index, stride }
                } else {
                    Gene::Attention { index, stride }
                })
            }
            'm' => Ok(Gene::MbConv {
                index: parse_u8(token, rest)?,
            }),
            'w' => Ok(Gene::Width {
                index: parse_u8(token, rest)?,
            }),
            _ => Err(malformed(token, "unknown gene kind letter")),
        }
    }
}
