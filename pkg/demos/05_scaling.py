"""Dense full-graph propagation against the searched subgraph as N grows."""

from gsnn.benchmark import BenchConfig, format_records, scaling_benchmark

records, exponents = scaling_benchmark(BenchConfig(sizes=(250, 500, 1000, 2000), trials=5))
print(format_records(records, exponents))
# Dense cost grows roughly with N^2; the search cost is set by the budget and barely moves.
