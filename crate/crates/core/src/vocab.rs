//! Closed vocabularies shared by the simulator, the scene schema and the
//! query layer. Each value has a stable lowercase name and an integer code
//! (its position in `ALL`), which is what numeric query results carry.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownWord {
    pub kind: &'static str,
    pub word: String,
}

impl fmt::Display for UnknownWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown {} {:?}", self.kind, self.word)
    }
}

impl std::error::Error for UnknownWord {}

macro_rules! vocabulary {
    ($(#[$meta:meta])* $name:ident, $kind:literal, { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn code(self) -> u8 {
                Self::ALL.iter().position(|v| *v == self).unwrap() as u8
            }

            pub fn from_code(code: u8) -> Option<Self> {
                Self::ALL.get(code as usize).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = UnknownWord;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let lower = s.trim().to_ascii_lowercase();
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == lower)
                    .ok_or_else(|| UnknownWord { kind: $kind, word: s.to_string() })
            }
        }
    };
}

vocabulary!(
    /// Vehicle class (`ty`).
    VehicleType, "vehicle type", {
        Car => "car",
        Truck => "truck",
        Bus => "bus",
        Motorcycle => "motorcycle",
    }
);

vocabulary!(
    /// Body color (`co`).
    Color, "color", {
        Red => "red",
        Yellow => "yellow",
        Blue => "blue",
        White => "white",
        Black => "black",
        Green => "green",
        Gray => "gray",
    }
);

vocabulary!(
    /// Signal status (`sg`).
    Signal, "signal", {
        None => "none",
        Left => "left",
        Right => "right",
        Brake => "brake",
    }
);
