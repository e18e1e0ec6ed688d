"""Train the visit-sequence code embedder and check what the vectors learned.

The training signal is next/previous-visit code prediction inside a small
window, so codes that travel together across visits end up with similar
embedding rows. With planted conditions we can score that directly: pairs
of codes from the same condition should have higher cosine similarity than
pairs from different conditions, and the model should rank next-visit
diagnoses better than a plain frequency baseline.
"""

import numpy as np

from visitrep.code_embedder import CodeEmbedderConfig, train_code_embedder
from visitrep.cohort import build_vocabulary, patient_kfold_split
from visitrep.evaluation import auc_roc, frequency_baseline, next_code_recall
from visitrep.synth import SynthConfig, generate_cohort


def main():
    cohort, gt = generate_cohort(
        SynthConfig(n_patients=300, n_conditions=6, label_noise=0.1, seed=9)
    )
    folds = patient_kfold_split(cohort, 5, seed=1)
    held = set(folds[0])
    train = cohort.subset([p for p in cohort.patient_ids() if p not in held])
    test = cohort.subset(list(folds[0]))
    vocab = build_vocabulary(train)
    print(f"train {len(train)} / test {len(test)} patients, |C| = {len(vocab)}")

    cfg = CodeEmbedderConfig(
        d_code=24, n_layers=1, n_heads=4, d_head=6, window=2,
        epochs=80, batch_size=32, lr0=2e-3, lr_period=80, seed=3,
    )
    model, history = train_code_embedder(train, vocab, cfg)
    print(f"loss {history.train_loss[0]:.4f} -> {history.train_loss[-1]:.4f} "
          f"over {len(history.train_loss)} epochs (best {history.best_epoch})")

    emb = model.embed.data
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    owner = gt.code_condition()
    cond = [owner.get((e.system, e.group_id)) for e in vocab.entries]
    sims, labels = [], []
    for i in range(len(vocab)):
        for j in range(i + 1, len(vocab)):
            if cond[i] is None or cond[j] is None:
                continue
            sims.append(float(emb[i] @ emb[j]))
            labels.append(1 if cond[i] == cond[j] else 0)
    sims, labels = np.array(sims), np.array(labels)
    print(f"mean cosine, same condition:  {sims[labels == 1].mean():+.3f}")
    print(f"mean cosine, cross condition: {sims[labels == 0].mean():+.3f}")
    print(f"same-vs-cross pair AUC: {auc_roc(sims, labels):.3f}")

    means, _ = next_code_recall(model, test, vocab, ks=(10,))
    base, _ = next_code_recall(
        None, test, vocab, ks=(10,), ranking=frequency_baseline(train, vocab)
    )
    for system in ("dx", "proc", "med"):
        print(f"next-visit {system} recall@10: model {means[(system, 10)]:.3f} "
              f"vs frequency {base[(system, 10)]:.3f}")


if __name__ == "__main__":
    main()
