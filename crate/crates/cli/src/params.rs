//! Resolved run parameters: built-in defaults, then a `key=value` config
//! file, then command-line flags. Every subcommand's parameter set is
//! declared once with [`params!`], which generates the optional clap flags
//! and the fully resolved struct.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::CliError;

/// Comma-separated list value, e.g. `--gamma 0.01,0.001`.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("bad list item '{p}': {e}")))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Output directory; a newtype so it prints and parses like other values.
#[derive(Clone, Debug, PartialEq)]
pub struct OutDir(pub PathBuf);

impl FromStr for OutDir {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(OutDir(PathBuf::from(s)))
    }
}

impl fmt::Display for OutDir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

/// Keys written by the manifest that are not parameters.
pub fn is_meta_key(key: &str) -> bool {
    key == "subcommand" || key == "duration_s" || key.starts_with("sha256:")
}

pub trait Params: Sized + Default {
    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError>;
    fn pairs(&self) -> Vec<(String, String)>;

    /// Applies config-file pairs, skipping manifest bookkeeping.
    fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<(), CliError> {
        for (k, v) in pairs {
            if !is_meta_key(k) {
                self.set(k, v)?;
            }
        }
        Ok(())
    }
}

macro_rules! params {
    (
        $(#[$meta:meta])*
        $name:ident / $flags:ident {
            $( $field:ident : $ty:ty = $default:expr ; $help:literal )*
        }
    ) => {
        #[derive(clap::Args, Clone, Debug, Default)]
        pub struct $flags {
            $(
                #[arg(long, help = $help)]
                pub $field: Option<$ty>,
            )*
        }

        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $( pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default.parse().expect(concat!("default for ", stringify!($field))), )* }
            }
        }

        impl $name {
            pub fn overlay(&mut self, flags: &$flags) {
                $( if let Some(v) = &flags.$field { self.$field = v.clone(); } )*
            }
        }

        impl $crate::params::Params for $name {
            fn set(&mut self, key: &str, value: &str) -> Result<(), $crate::CliError> {
                match key.trim().replace('-', "_").as_str() {
                    $(
                        stringify!($field) => {
                            self.$field = value.trim().parse().map_err(|e| {
                                $crate::CliError::Usage(format!("bad value '{value}' for {key}: {e}"))
                            })?;
                        }
                    )*
                    _ => return Err($crate::CliError::Usage(format!("unknown key '{key}'"))),
                }
                Ok(())
            }

            fn pairs(&self) -> Vec<(String, String)> {
                vec![ $( (stringify!($field).replace('_', "-"), self.$field.to_string()), )* ]
            }
        }
    };
}

pub(crate) use params;

#[cfg(test)]
mod tests {
    use super::*;

    params! {
        Demo / DemoFlags {
            n: usize = "100"; "count"
            gamma: List<f64> = "0.01,0.001"; "list"
            tau_ms: f64 = "30"; "time"
        }
    }

    #[test]
    fn precedence_and_round_trip() {
        let mut p = Demo::default();
        assert_eq!(p.gamma, List(vec![0.01, 0.001]));
        p.apply_pairs(&[("n".into(), "5".into()), ("tau-ms".into(), "20".into())]).unwrap();
        p.overlay(&DemoFlags {
            n: Some(7),
            ..DemoFlags::default()
        });
        assert_eq!((p.n, p.tau_ms), (7, 20.0));

        let mut q = Demo::default();
        q.apply_pairs(&p.pairs()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let mut p = Demo::default();
        assert!(p.set("bogus", "1").is_err());
        assert!(p.set("n", "-1").is_err());
        assert!(p.set("gamma", "0.1,x").is_err());
        p.apply_pairs(&[("subcommand".into(), "x".into()), ("sha256:a.csv".into(), "00".into())]).unwrap();
    }
}
