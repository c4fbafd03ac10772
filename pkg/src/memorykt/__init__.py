"""memoryKT: knowledge tracing with a variational memory and forgetting-aware prediction."""
