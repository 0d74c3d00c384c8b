"""Reference controller clients speaking the NDJSON wire contract."""
