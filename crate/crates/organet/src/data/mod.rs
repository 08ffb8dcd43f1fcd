pub mod imops;
