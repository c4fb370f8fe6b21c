use std::fmt;

use serde::{Deserialize, Serialize};

/// The nine depression criteria, in fixed A–I order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
}

impl Criterion {
    pub const ALL: [Criterion; 9] = [
        Criterion::A,
        Criterion::B,
        Criterion::C,
        Criterion::D,
        Criterion::E,
        Criterion::F,
        Criterion::G,
        Criterion::H,
        Criterion::I,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Self> {
        let c = c.to_ascii_uppercase();
        if ('A'..='I').contains(&c) {
            Self::from_index((c as u8 - b'A') as usize)
        } else {
            None
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Criterion::A => "Depressed mood",
            Criterion::B => "Loss of interest/pleasure",
            Criterion::C => "Weight loss or gain",
            Criterion::D => "Insomnia or hypersomnia",
            Criterion::E => "Psychomotor agitation or retardation",
            Criterion::F => "Fatigue",
            Criterion::G => "Inappropriate guilt",
            Criterion::H => "Decreased concentration",
            Criterion::I => "Thoughts of suicide",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Binary 9-vector over criteria A–I.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymptomVector([u8; 9]);

impl SymptomVector {
    pub const ZERO: SymptomVector = SymptomVector([0; 9]);

    pub fn from_criteria<I: IntoIterator<Item = Criterion>>(criteria: I) -> Self {
        let mut v = [0u8; 9];
        for c in criteria {
            v[c.index()] = 1;
        }
        SymptomVector(v)
    }

    /// From the 9 low bits of `mask`, bit 0 = A.
    pub fn from_mask(mask: u16) -> Self {
        let mut v = [0u8; 9];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = ((mask >> i) & 1) as u8;
        }
        SymptomVector(v)
    }

    pub fn flags(&self) -> [u8; 9] {
        self.0
    }

    pub fn get(&self, c: Criterion) -> bool {
        self.0[c.index()] == 1
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 9]
    }

    pub fn criteria(&self) -> Vec<Criterion> {
        Criterion::ALL.into_iter().filter(|c| self.get(*c)).collect()
    }

    /// The annotation reply format: `(A, B, C)` or `None`.
    pub fn to_annotation(&self) -> String {
        if self.is_zero() {
            return "None".to_string();
        }
        let letters: Vec<String> = self.criteria().iter().map(|c| c.letter().to_string()).collect();
        format!("({})", letters.join(", "))
    }
}

impl fmt::Display for SymptomVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_annotation())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letters_round_trip() {
        for c in Criterion::ALL {
            assert_eq!(Criterion::from_letter(c.letter()), Some(c));
            assert_eq!(Criterion::from_letter(c.letter().to_ascii_lowercase()), Some(c));
        }
        assert_eq!(Criterion::from_letter('J'), None);
    }

    #[test]
    fn annotation_format() {
        assert_eq!(SymptomVector::ZERO.to_annotation(), "None");
        let v = SymptomVector::from_criteria([Criterion::I, Criterion::G]);
        assert_eq!(v.flags(), [0, 0, 0, 0, 0, 0, 1, 0, 1]);
        assert_eq!(v.to_annotation(), "(G, I)");
    }
}
