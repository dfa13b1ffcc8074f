//! File formats, simulation studies and the `mimi` command line around
//! [`mimi_core`].
//!
//! ```no_run
//! use mimi::io::{read_csv_path, read_dictionary_path, Schema};
//! use mimi_core::{fit, SolverConfig};
//!
//! let schema = Schema::from_path("schema.json")?;
//! let data = read_csv_path("survey.csv", Some(&schema))?;
//! let links = schema.links(&data)?;
//! let dict = read_dictionary_path("groups.json", data.nrows(), data.ncols())?;
//! let model = fit(&data, &links, &dict, &SolverConfig::with_lambdas(5.0, 2.0))?;
//! println!("objective {}", model.objective());
//! # Ok::<(), mimi::Error>(())
//! ```

pub mod cli;
mod error;
pub mod experiments;
pub mod io;
pub mod report;

pub use error::{Error, Result};
pub use mimi_core;
