"""
Quick Demo Script - Runs the feature-discovery pipeline end to end on a small synthetic corpus
"""
import sys
import os
import tempfile

# Fix Windows console encoding
if sys.platform == 'win32':
    sys.stdout.reconfigure(encoding='utf-8')

from latent_lens.embedding_store import make_split, subset
from latent_lens.probe import ProbeConfig, fit_probe
from latent_lens.sae_core import ReluActivation, SaeConfig, TopKActivation, dead_latents, train
from latent_lens.splitting import build_flows, detect_splits, to_sankey
from latent_lens.steering import SteerConfig, build_context, run_steering
from latent_lens.synth import PlantedAttribute, SynthSpec, generate


def print_header(text):
    """Print formatted header"""
    print("\n" + "="*70)
    print(f"  {text}")
    print("="*70 + "\n")


def demo_corpus():
    """Small corpus: one attribute planted as two orthogonal subcomponents"""
    spec = SynthSpec(
        dim=32,
        n_samples=4000,
        n_speakers=60,
        noise_sigma=0.05,
        seed=7,
        attributes=[
            PlantedAttribute(
                name="spanish", prevalence=0.4, strength=1.5,
                n_subcomponents=2, subcomponent_mix=0.4, subcomponent_names=["male", "female"],
            ),
        ],
    )
    return generate(spec)


def demo_training(result, split):
    """Demo 1: TopK vs ReLU training and dead latents"""
    print_header("DEMO 1: Training Sparse Autoencoders")

    train_corpus = subset(result.corpus, split.train_indices)
    val_corpus = subset(result.corpus, split.test_indices)
    models = {}
    for name, activation in (("TopK k=8", TopKActivation(k=8)), ("ReLU+L1", ReluActivation(l1_lambda=1e-3))):
        config = SaeConfig(input_dim=result.corpus.dim, latent_dim=64, activation=activation, epochs=15, seed=7)
        model, stats = train(config, train_corpus, val_corpus)
        models[name] = model
        print(f"  {name}:")
        print(f"    Validation MSE: {stats.initial_val_mse:.4f} -> {stats.final_val_mse:.4f}")
        print(f"    Dead latents:   {len(dead_latents(model, val_corpus))} / {config.latent_dim}")
    print()
    return models["TopK k=8"]


def demo_probe_and_steer(model, result, split):
    """Demo 2: Find the attribute's latent and steer it"""
    print_header("DEMO 2: Feature Probing and Steering")

    labels = result.labels["spanish"]
    probe = fit_probe(model, result.corpus, labels, split, ProbeConfig())
    print("PROBE:")
    print(f"  Feature index phi: {probe.phi}")
    print(f"  Precision: {probe.test.precision:.3f}   Recall: {probe.test.recall:.3f}")
    for stratum, recall in probe.test.per_stratum.items():
        print(f"    {stratum}: recall {recall.recall:.3f} ({recall.detected}/{recall.positives})")
    print()

    ctx = build_context(model, result.corpus, labels, split.train_indices)
    report = run_steering(
        model, ctx, result.corpus, labels, split.test_indices,
        SteerConfig(phi=probe.phi, positive_class="spanish", negative_class="english"),
    )
    print("STEERING (mean relative similarity):")
    print(report.means_table().to_string(index=False))
    print()


def demo_splitting(result, split):
    """Demo 3: Feature splitting across latent dimensions"""
    print_header("DEMO 3: Feature Splitting")

    train_corpus = subset(result.corpus, split.train_indices)
    val_corpus = subset(result.corpus, split.test_indices)
    models = []
    for latent_dim in (16, 32, 64, 128):
        config = SaeConfig(
            input_dim=result.corpus.dim, latent_dim=latent_dim, activation=TopKActivation(k=8), epochs=15, seed=7,
        )
        models.append(train(config, train_corpus, val_corpus)[0])

    flows = build_flows(models, result.corpus, result.labels["spanish"], split)
    report = detect_splits(flows)
    for cell in report.cells:
        marker = "⚡" if cell.divergent else " "
        purity = {k: round(v, 2) for k, v in cell.purity.items()}
        print(f"  {marker} L={cell.latent_dim:<4} dominant={cell.dominant} purity={purity}")
    print()
    if report.split_latent_dim is not None:
        print(f"  ✓ Feature splits at L={report.split_latent_dim}")
    else:
        print("  No split within the tested latent dimensions")

    sankey = to_sankey(flows)
    print(f"  Sankey: {len(sankey['nodes'])} nodes, {len(sankey['links'])} links, "
          f"{sankey['metadata']['tracked_samples']} tracked samples")


def main():
    """Run complete demo"""
    print("\n" + "█"*70)
    print("█" + " "*68 + "█")
    print("█" + "  LATENT LENS - SPARSE AUTOENCODER FEATURE ANALYSIS".center(68) + "█")
    print("█" + "  Train, probe, steer and split on a synthetic corpus".center(68) + "█")
    print("█" + " "*68 + "█")
    print("█"*70)

    try:
        result = demo_corpus()
        labels = result.labels["spanish"]
        split = make_split(result.corpus.count, 0.2, seed=7, label_vector=labels.label_vector(result.corpus))
        print(f"\nCorpus: {result.corpus.count} samples, dim {result.corpus.dim}, "
              f"train {len(split.train_indices)} / test {len(split.test_indices)}")

        model = demo_training(result, split)
        demo_probe_and_steer(model, result, split)
        demo_splitting(result, split)

        # Summary
        print_header("DEMO COMPLETED SUCCESSFULLY")
        print("Next Steps:")
        out = os.path.join(tempfile.gettempdir(), "latent-lens-demo")
        print(f"  1. Full pipeline: python -m cli.main synth --config configs/standard_synthetic.json --out {out}")
        print("  2. Then: train, probe, steer, grid, split, export with the same --config/--out")
        print("  3. Acceptance runs: pytest -m slow")
        print()
        print("="*70)
        print()

    except Exception as e:
        print(f"\n❌ Error during demo: {str(e)}")
        import traceback
        traceback.print_exc()


if __name__ == "__main__":
    main()
