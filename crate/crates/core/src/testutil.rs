//! Test-only oracles and fixtures (feature `testutil`).
