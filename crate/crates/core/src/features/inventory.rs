use crate::error::{Error, Result};

/// Start-of-sequence token, always at index 0.
pub const START_TOKEN: &str = "<s>";

/// The 39-symbol ARPABET set (stress markers removed), lower case.
pub const ARPABET: [&str; 39] = [
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey", "f", "g", "hh",
    "ih", "iy", "jh", "k", "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh", "t", "th", "uh",
    "uw", "v", "w", "y", "z", "zh",
];

/// Number of one-hot classes: 39 phonemes plus the start token.
pub const INVENTORY_SIZE: usize = 40;

/// Fixed symbol ↔ index mapping. Index 0 is [`START_TOKEN`]; phonemes follow
/// in [`ARPABET`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhonemeInventory;

impl PhonemeInventory {
    pub fn len(&self) -> usize {
        INVENTORY_SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start_index(&self) -> usize {
        0
    }

    /// Symbol at `index`.
    pub fn symbol(&self, index: usize) -> Option<&'static str> {
        match index {
            0 => Some(START_TOKEN),
            i if i <= ARPABET.len() => Some(ARPABET[i - 1]),
            _ => None,
        }
    }

    /// Index of a phoneme label. Labels are matched case-insensitively and
    /// trailing stress digits (`AA1`) are ignored. The start token is not a
    /// phoneme and is rejected here.
    pub fn index(&self, label: &str) -> Result<usize> {
        let norm = normalize(label);
        ARPABET
            .iter()
            .position(|p| *p == norm)
            .map(|i| i + 1)
            .ok_or_else(|| Error::Inventory(label.to_string()))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index(label).is_ok()
    }

    pub fn symbols(&self) -> impl Iterator<Item = &'static str> {
        std::iter::once(START_TOKEN).chain(ARPABET.iter().copied())
    }
}

/// Canonical spelling of a phoneme label.
pub fn normalize(label: &str) -> String {
    label
        .trim()
        .trim_end_matches(|c: char| c.is_ascii_digit())
        .to_ascii_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forty_entries_with_start_at_zero() {
        let inv = PhonemeInventory;
        assert_eq!(inv.symbols().count(), 40);
        assert_eq!(inv.symbol(0), Some(START_TOKEN));
        assert_eq!(inv.index("aa").unwrap(), 1);
        assert_eq!(inv.index("ZH").unwrap(), 39);
        assert_eq!(inv.symbol(40), None);
    }

    #[test]
    fn labels_are_normalized() {
        let inv = PhonemeInventory;
        assert_eq!(inv.index("AH0").unwrap(), inv.index("ah").unwrap());
        assert!(matches!(inv.index("sil"), Err(Error::Inventory(_))));
        assert!(inv.index(START_TOKEN).is_err());
    }

    #[test]
    fn symbols_are_unique() {
        let mut all: Vec<_> = PhonemeInventory.symbols().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 40);
    }
}
