use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Glasses,
    MouthOpen,
    Elderly,
    Male,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Self::Glasses, Self::MouthOpen, Self::Elderly, Self::Male];
    pub const LOCAL: [Attribute; 2] = [Self::Glasses, Self::MouthOpen];

    pub fn name(self) -> &'static str {
        match self {
            Self::Glasses => "glasses",
            Self::MouthOpen => "mouth_open",
            Self::Elderly => "elderly",
            Self::Male => "male",
        }
    }

    /// Local attributes are drawn as a glyph inside a fixed region and have
    /// a mask; global ones restyle the whole face.
    pub fn is_local(self) -> bool {
        matches!(self, Self::Glasses | Self::MouthOpen)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attribute {s:?}")))
    }
}

/// Binary labels indexed by [`Attribute`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Attributes(pub [bool; 4]);

impl Attributes {
    pub fn get(&self, a: Attribute) -> bool {
        self.0[a.index()]
    }

    pub fn set(&mut self, a: Attribute, value: bool) {
        self.0[a.index()] = value;
    }

    pub fn with(mut self, a: Attribute, value: bool) -> Self {
        self.set(a, value);
        self
    }
}

/// Probability of each attribute being present.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Marginals(pub [f64; 4]);

impl Default for Marginals {
    fn default() -> Self {
        Self([0.5, 0.5, 0.3, 0.5])
    }
}

impl Marginals {
    pub fn get(&self, a: Attribute) -> f64 {
        self.0[a.index()]
    }

    pub fn set(&mut self, a: Attribute, p: f64) {
        self.0[a.index()] = p;
    }

    pub fn validate(&self) -> Result<(), Error> {
        for a in Attribute::ALL {
            let p = self.get(a);
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("marginal for {a} is {p}, outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// The attribute state a transform should produce, e.g. `no_glasses`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Target {
    pub attribute: Attribute,
    pub present: bool,
}

impl Target {
    pub fn new(attribute: Attribute, present: bool) -> Self {
        Self { attribute, present }
    }

    /// Whether a sample with these labels already has the target state.
    pub fn satisfied_by(&self, labels: &Attributes) -> bool {
        labels.get(self.attribute) == self.present
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.present {
            write!(f, "{}", self.attribute)
        } else {
            write!(f, "no_{}", self.attribute)
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.strip_prefix("no_") {
            Some(rest) => Ok(Self::new(rest.parse()?, false)),
            None => Ok(Self::new(s.parse()?, true)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for a in Attribute::ALL {
            assert_eq!(a.name().parse::<Attribute>().unwrap(), a);
            for present in [true, false] {
                let t = Target::new(a, present);
                assert_eq!(t.to_string().parse::<Target>().unwrap(), t);
            }
        }
        assert!("beard".parse::<Attribute>().is_err());
        assert!("no_beard".parse::<Target>().is_err());
    }

    #[test]
    fn target_satisfaction() {
        let t: Target = "no_glasses".parse().unwrap();
        let labels = Attributes::default().with(Attribute::Glasses, true);
        assert!(!t.satisfied_by(&labels));
        assert!(t.satisfied_by(&Attributes::default()));
    }
}
