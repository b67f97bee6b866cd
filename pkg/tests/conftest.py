import numpy as np
import pytest

# one line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)

from phenorank.kg import load_graph
from phenorank.model import ModelConfig


def write_graph(tmp_path, nodes, edges, name="g"):
    """Write TSV node/edge files and return their paths.

    `nodes` is a list of (key, type, name) rows, `edges` a list of
    (src, relation, dst) rows.
    """
    node_file = tmp_path / f"{name}_nodes.tsv"
    edge_file = tmp_path / f"{name}_edges.tsv"
    node_file.write_text("".join("\t".join(r) + "\n" for r in nodes), encoding="utf-8")
    edge_file.write_text("".join("\t".join(r) + "\n" for r in edges), encoding="utf-8")
    return node_file, edge_file


def random_graph(rng, n_nodes, n_edges, gene_frac=0.3, pheno_frac=0.2):
    """Random typed node/edge rows with no self or duplicate edges."""
    types = []
    for i in range(n_nodes):
        u = rng.random()
        if u < pheno_frac:
            types.append("phenotype")
        elif u < pheno_frac + gene_frac:
            types.append("gene")
        elif u < pheno_frac + gene_frac + 0.2:
            types.append("disease")
        else:
            types.append("other")
    nodes = [(f"n{i}", types[i], f"node {i}") for i in range(n_nodes)]
    pairs = set()
    while len(pairs) < n_edges:
        u, v = rng.integers(n_nodes, size=2)
        if u != v:
            pairs.add((min(int(u), int(v)), max(int(u), int(v))))
    edges = [(f"n{u}", "rel", f"n{v}") for u, v in sorted(pairs)]
    return nodes, edges


@pytest.fixture
def star_graph(tmp_path):
    """Phenotype center p0 with gene leaves g1..g4."""
    nodes = [("p0", "phenotype", "center")] + \
            [(f"g{i}", "gene", f"leaf {i}") for i in range(1, 5)]
    edges = [("p0", "assoc", f"g{i}") for i in range(1, 5)]
    return load_graph(*write_graph(tmp_path, nodes, edges))


@pytest.fixture
def chain_graph(tmp_path):
    """p0 - d1 - g2 chain."""
    nodes = [("p0", "phenotype", "p"), ("d1", "disease", "d"), ("g2", "gene", "g")]
    edges = [("p0", "causes", "d1"), ("d1", "harbors", "g2")]
    return load_graph(*write_graph(tmp_path, nodes, edges))


@pytest.fixture
def small_model_config():
    return ModelConfig(embed_dim=8, hidden_dim=8, out_dim=6, heads=2, layers=2,
                       attn_proj_dim=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
