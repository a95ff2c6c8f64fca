pub mod dataset;
pub mod evalkit;
pub mod fairstep;
pub mod numkit;
pub mod recmodels;
