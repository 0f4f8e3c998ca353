//! ICD-10 code parsing and the 3-character family rollup.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("malformed ICD-10 code {text:?}: {reason}")]
    MalformedCode { text: String, reason: &'static str },
}

/// A normalized ICD-10 code: uppercase, no dot, 3 to 7 characters.
///
/// The first character is a letter, the next two are digits, and up to four
/// alphanumerics follow.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IcdCode(String);

impl IcdCode {
    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        parse_code(text)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The first three characters, itself a valid code.
    pub fn family(&self) -> IcdCode {
        IcdCode(self.0[..3].to_string())
    }

    pub fn is_family(&self) -> bool {
        self.0.len() == 3
    }
}

/// Parses and normalizes a code. Accepts `"E11.9"` and `"e119"` alike.
pub fn parse_code(text: &str) -> Result<IcdCode, TaxonomyError> {
    let fail = |reason| TaxonomyError::MalformedCode { text: text.to_string(), reason };
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(fail("empty"));
    }
    let mut normalized = String::with_capacity(trimmed.len());
    let mut dots = 0;
    for (i, ch) in trimmed.chars().enumerate() {
        if ch == '.' {
            dots += 1;
            if dots > 1 {
                return Err(fail("more than one '.'"));
            }
            if i < 3 {
                return Err(fail("'.' inside the 3-character family"));
            }
            continue;
        }
        if !ch.is_ascii_alphanumeric() {
            return Err(fail("non-alphanumeric character"));
        }
        normalized.push(ch.to_ascii_uppercase());
    }
    let bytes = normalized.as_bytes();
    if bytes.len() < 3 {
        return Err(fail("shorter than 3 characters"));
    }
    if bytes.len() > 7 {
        return Err(fail("longer than 7 characters"));
    }
    if !bytes[0].is_ascii_uppercase() {
        return Err(fail("must start with a letter"));
    }
    if !bytes[1].is_ascii_digit() || !bytes[2].is_ascii_digit() {
        return Err(fail("characters 2 and 3 must be digits"));
    }
    Ok(IcdCode(normalized))
}

pub fn family_of(code: &IcdCode) -> IcdCode {
    code.family()
}

impl fmt::Display for IcdCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for IcdCode {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_code(s)
    }
}

impl AsRef<str> for IcdCode {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for IcdCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for IcdCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_code(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dotted_lowercase_is_normalized() {
        let c = parse_code("e11.9").unwrap();
        assert_eq!(c.as_str(), "E119");
        assert_eq!(c.family().as_str(), "E11");
    }

    #[test]
    fn three_character_code_is_its_own_family() {
        let c = parse_code("I10").unwrap();
        assert_eq!(c.as_str(), "I10");
        assert_eq!(c.family(), c);
        assert!(c.is_family());
    }

    #[test]
    fn rejects_bad_patterns() {
        for bad in ["1AB", "", "  ", "E1", "E1A9", "E11.9.1", "E.119", "E11-9", "E1190000", "EE11"] {
            assert!(matches!(parse_code(bad), Err(TaxonomyError::MalformedCode { .. })), "{bad:?} accepted");
        }
    }

    #[test]
    fn accepts_seven_characters() {
        assert_eq!(parse_code("S72.001A").unwrap().as_str(), "S72001A");
    }

    #[test]
    fn family_examples() {
        for (code, fam) in [("E119", "E11"), ("Z511", "Z51"), ("A00", "A00")] {
            assert_eq!(family_of(&parse_code(code).unwrap()).as_str(), fam);
        }
    }

    #[test]
    fn siblings_share_a_family_exhaustively() {
        // every code over a small alphabet, grouped by family, must map to its prefix
        let letters = ['A', 'Z'];
        let digits = ['0', '9'];
        let tails = ["", "0", "X", "09", "X9A"];
        for l in letters {
            for d1 in digits {
                for d2 in digits {
                    let family = format!("{l}{d1}{d2}");
                    for t in tails {
                        let code = parse_code(&format!("{family}{t}")).unwrap();
                        assert_eq!(family_of(&code).as_str(), family);
                        let dotted = if t.is_empty() { family.clone() } else { format!("{family}.{t}") };
                        assert_eq!(parse_code(&dotted).unwrap(), code);
                    }
                }
            }
        }
    }

    #[test]
    fn serde_validates() {
        let c: IcdCode = serde_json::from_str("\"k35.8\"").unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), "\"K358\"");
        assert!(serde_json::from_str::<IcdCode>("\"35K\"").is_err());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "[a-zA-Z][0-9]{2}\\.?[a-zA-Z0-9]{0,4}") {
            let once = parse_code(&s).unwrap();
            let twice = parse_code(once.as_str()).unwrap();
            prop_assert_eq!(&once, &twice);
        }

        #[test]
        fn family_is_a_projection(s in "[A-Z][0-9]{2}[A-Z0-9]{0,4}") {
            let c = parse_code(&s).unwrap();
            let f = family_of(&c);
            prop_assert_eq!(f.as_str().len(), 3);
            prop_assert_eq!(family_of(&f), f.clone());
            prop_assert_eq!(parse_code(f.as_str()).unwrap(), f);
        }

        #[test]
        fn arbitrary_text_never_panics(s in "\\PC{0,10}") {
            let _ = parse_code(&s);
        }
    }
}
