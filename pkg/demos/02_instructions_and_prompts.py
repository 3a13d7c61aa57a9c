"""
From clusters to prompts
========================

"""

# build a small workspace by hand: cut, index and instruction store
import tempfile

from instruction_corpus.backends import HashEmbeddings, MockChat, auto_responder
from instruction_corpus.cluster import build_dendrogram, cut_dendrogram
from instruction_corpus.core import HS_CONCISE, Split
from instruction_corpus.infer import PromptBudget, assemble_prompt, query_text
from instruction_corpus.instructgen import InstructionStore, generate_corpus, make_job
from instruction_corpus.retrieve import build_index, top_k
from instruction_corpus.synthetic import make_questions
from instruction_corpus.templates import TEMPLATES

questions = make_questions("MMLULaw", n_train=42, n_test=3, seed=1)
train = [q for q in questions if q.split == Split.TRAIN]
test = [q for q in questions if q.split == Split.TEST]

embedder = HashEmbeddings(dim=64)
vecs = embedder.embed_batch([query_text(q) for q in train])
cut = cut_dendrogram(build_dendrogram(vecs), 0.8, [q.id for q in train])
print(len(cut.clusters), "clusters")

# the generation prompt for one cluster: template plus up to five sampled examples
qmap = {q.id: q for q in train}
job = make_job(cut.clusters[0], HS_CONCISE, qmap, rng_seed=0)
print(job.rendered_prompt[-400:])
print("template length", len(TEMPLATES[HS_CONCISE]))

# a deterministic mock writes the two-section instructions
store = InstructionStore(tempfile.mkdtemp() + "/store.json", cut.threshold_id, HS_CONCISE)
result = generate_corpus(cut, HS_CONCISE, qmap, MockChat(auto_responder(0)), store)
print(len(result.instructions), "instructions,", len(result.failed), "failed")
print(next(iter(store.instructions.values())).raw)

# retrieval: cosine against normalized centroids
index = build_index(cut, {q.id: v for q, v in zip(train, vecs)})
q = test[0]
ranked = top_k(index, embedder.embed_batch([query_text(q)])[0].array, 5)
for cid, sim in ranked:
    print(cid, round(sim, 3))

# prompt assembly under a budget; a tight limit drops the lowest-ranked blocks
instrs = [store.get(cid) for cid, _ in ranked]
roomy = assemble_prompt(q, instrs, PromptBudget())
tight = assemble_prompt(q, instrs, PromptBudget(roomy.token_count - 10 + 64, 64))
print("roomy:", len(roomy.instructions_used), "instructions,", roomy.token_count, "tokens")
print("tight:", len(tight.instructions_used), "instructions,", tight.token_count, "tokens")
print(tight.text[-250:])
