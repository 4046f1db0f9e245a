"""Does the keyword pathway help when categories carry signal?

Items are split into groups that each share a "groupN" category, and every
user's itinerary stays inside one group.  With few events per user the item
embeddings alone see little co-occurrence, while the keyword projection tells
the model which group a history belongs to.  The script trains the same
model with and without keywords on several seeds and prints validation
HR@10 for both.

Run:  python demos/keyword_ablation.py [num_seeds]
"""
import sys

from poirec import ModelConfig, SyntheticSpec, TrainConfig, fit, generate_synthetic, prepare_corpus
from poirec.trainer import validation_hr10


def main(num_seeds=5):
    wins = 0
    for seed in range(num_seeds):
        interactions, metadata = generate_synthetic(
            SyntheticSpec(40, 60, 6, 0.0, seed=seed, events_per_user=12, correlated_keywords=True))
        data = prepare_corpus(interactions, metadata)
        train = TrainConfig(epochs=10, batch_size=4, negatives_per_positive=8, mask_ratio=0.3,
                            last_item_mask_prob=0.5, seed=seed)
        scores = []
        for use_keywords in (True, False):
            model = ModelConfig(num_layers=1, num_heads=2, hidden_size=32, max_seq_len=20,
                                dropout_rate=0.0, use_keywords=use_keywords)
            params = fit(data, train, model).params
            scores.append(validation_hr10(params, data, model, train))
        wins += scores[0] >= scores[1]
        print(f"seed {seed}: keywords {scores[0]:.3f}  ablated {scores[1]:.3f}")
    print(f"keywords at least as good on {wins}/{num_seeds} seeds")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
