#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "taalm/common.hpp"
#include "taalm/rng.hpp"

namespace taalm {

// Synthetic knowledge world: subjects, per-relation object pools, invariant
// facts (the pretraining corpus) and variant facts (reserved for learning).
struct WorldSpec {
    int n_subjects = 96;
    int n_object_entities = 64;
    int objects_per_relation = 16;
    int n_invariant_relations = 6;
    int n_variant_relations = 6;
    int invariant_facts_per_subject = 3;
    int vocab_size = 512;
    std::uint64_t seed = 1;
    int sentences_min = 3;   // evidence sentences, informative one included
    int sentences_max = 5;
    int distractor_min = 2;  // known-fact sentences per evidence document
    int distractor_max = 4;
    int two_token_entity_pct = 30;
    int benchmark_candidates = 128;  // variant triples reserved for the benchmark
    int ta_train_pairs = 192;        // variant triples reserved for TA training
    int n_filler_tokens = 24;
    int max_doc_len = 96;

    void validate() const {
        if (n_subjects < 4 || n_object_entities < 4 || objects_per_relation < 2) {
            throw ConfigError("world spec: entity counts too small");
        }
        if (n_invariant_relations < 4 || n_variant_relations < 4) {
            throw ConfigError("world spec: at least 4 invariant and 4 variant relations required");
        }
        if (objects_per_relation > n_object_entities) {
            throw ConfigError("world spec: objects_per_relation exceeds the object pool");
        }
        if (invariant_facts_per_subject < 1 ||
            invariant_facts_per_subject > n_invariant_relations) {
            throw ConfigError("world spec: invariant_facts_per_subject out of range");
        }
        if (sentences_min < 1 || sentences_max < sentences_min) {
            throw ConfigError("world spec: invalid sentences_per_evidence range");
        }
        if (distractor_min < 0 || distractor_max < distractor_min) {
            throw ConfigError("world spec: invalid distractor_count range");
        }
        if (distractor_min + 1 > sentences_max || distractor_max + 1 < sentences_min) {
            throw ConfigError("world spec: distractor range incompatible with sentence range");
        }
        if (two_token_entity_pct < 0 || two_token_entity_pct > 100) {
            throw ConfigError("world spec: two_token_entity_pct must be a percentage");
        }
        if (benchmark_candidates < 1 || ta_train_pairs < 1) {
            throw ConfigError("world spec: candidate counts must be positive");
        }
        const int variant_slots = n_subjects * n_variant_relations;
        if (benchmark_candidates + ta_train_pairs > variant_slots) {
            throw ConfigError("world spec: not enough (subject, variant relation) slots for " +
                              std::to_string(benchmark_candidates + ta_train_pairs) + " triples");
        }
        if (n_filler_tokens < 2) {
            throw ConfigError("world spec: n_filler_tokens too small");
        }
        if (max_doc_len < 8) {
            throw ConfigError("world spec: max_doc_len too small");
        }
    }
};

struct Relation {
    int id = 0;
    bool variant = false;
    int cue_a = 0, cue_b = 0;   // surface tokens
    int obj_lo = 0, obj_hi = 0; // admissible object entity ids [lo, hi)
    int desc_shape = 0;         // 0: cues before label; 1: trailing cue after label
};

struct Entity {
    int id = 0;
    std::vector<int> toks;  // 1 or 2 surface tokens
};

enum class TripleRole { Pretrain, Bench, TaTrain };

struct KnowledgeTriple {
    int id = 0;
    int subject = 0;   // subject entity id
    int relation = 0;  // relation id
    int object = 0;    // object entity id
    bool variant = false;
    TripleRole role = TripleRole::Pretrain;
};

struct Document {
    std::vector<int> tokens;
    int span_lo = -1, span_hi = -1;  // object token positions [lo, hi)
    int triple_id = -1;
    int uid = -1;  // stable identity for provider caches
};

enum class TaskForm { Descriptive, Schematic };

struct TaskInstance {
    std::vector<int> tokens;
    std::vector<int> label_span;  // token positions of the object surface
    TaskForm form = TaskForm::Descriptive;
    int triple_id = -1;
};

struct World {
    WorldSpec spec;
    std::vector<Relation> relations;
    std::vector<Entity> subjects;
    std::vector<Entity> objects;
    std::vector<KnowledgeTriple> triples;   // invariant first, then variant
    std::vector<Document> corpus;           // pretraining documents with spans
    int tok_bos = 0, tok_period = 1, tok_ans = 2;
    int filler_lo = 0, filler_hi = 0;       // [lo, hi)
    int relation_tok_lo = 0, relation_tok_hi = 0;
    int entity_tok_lo = 0, entity_tok_hi = 0;

    const KnowledgeTriple& triple(int id) const {
        if (id < 0 || id >= static_cast<int>(triples.size())) {
            throw ConfigError("unknown triple id " + std::to_string(id));
        }
        return triples[static_cast<std::size_t>(id)];
    }

    std::string token_name(int t) const;
};

namespace detail {

inline void append_entity(std::vector<int>& out, const Entity& e) {
    out.insert(out.end(), e.toks.begin(), e.toks.end());
}

}  // namespace detail

// Descriptive sentence: natural order, label possibly mid-sentence.
//   shape 0:  S ra rb O .
//   shape 1:  S ra O rb .      (trailing cue after the label)
// Schematic sentence: every cue strictly before the label.
//   ra rb S => O .
inline std::vector<int> render_sentence(const World& w, const KnowledgeTriple& t, TaskForm form,
                                        int* span_lo = nullptr, int* span_hi = nullptr) {
    const Relation& rel = w.relations[static_cast<std::size_t>(t.relation)];
    const Entity& subj = w.subjects[static_cast<std::size_t>(t.subject)];
    const Entity& obj = w.objects[static_cast<std::size_t>(t.object)];
    std::vector<int> out;
    if (form == TaskForm::Schematic) {
        out.push_back(rel.cue_a);
        out.push_back(rel.cue_b);
        detail::append_entity(out, subj);
        out.push_back(w.tok_ans);
        if (span_lo) {
            *span_lo = static_cast<int>(out.size());
        }
        detail::append_entity(out, obj);
        if (span_hi) {
            *span_hi = static_cast<int>(out.size());
        }
        out.push_back(w.tok_period);
        return out;
    }
    detail::append_entity(out, subj);
    out.push_back(rel.cue_a);
    if (rel.desc_shape == 0) {
        out.push_back(rel.cue_b);
        if (span_lo) {
            *span_lo = static_cast<int>(out.size());
        }
        detail::append_entity(out, obj);
        if (span_hi) {
            *span_hi = static_cast<int>(out.size());
        }
    } else {
        if (span_lo) {
            *span_lo = static_cast<int>(out.size());
        }
        detail::append_entity(out, obj);
        if (span_hi) {
            *span_hi = static_cast<int>(out.size());
        }
        out.push_back(rel.cue_b);
    }
    out.push_back(w.tok_period);
    return out;
}

inline TaskInstance render_task(const World& w, const KnowledgeTriple& t, TaskForm form) {
    int lo = 0, hi = 0;
    std::vector<int> sent = render_sentence(w, t, form, &lo, &hi);
    TaskInstance task;
    task.form = form;
    task.triple_id = t.id;
    task.tokens.push_back(w.tok_bos);
    task.tokens.insert(task.tokens.end(), sent.begin(), sent.end());
    for (int p = lo; p < hi; ++p) {
        task.label_span.push_back(p + 1);  // shifted by the BOS token
    }
    return task;
}

inline World generate_world(const WorldSpec& spec) {
    spec.validate();
    World w;
    w.spec = spec;
    Rng rng(spec.seed, 0x77);

    int next_tok = 3;  // 0 BOS, 1 period, 2 answer marker
    w.filler_lo = next_tok;
    next_tok += spec.n_filler_tokens;
    w.filler_hi = next_tok;

    const int n_rel = spec.n_invariant_relations + spec.n_variant_relations;
    w.relation_tok_lo = next_tok;
    for (int r = 0; r < n_rel; ++r) {
        Relation rel;
        rel.id = r;
        rel.variant = r >= spec.n_invariant_relations;
        rel.cue_a = next_tok++;
        rel.cue_b = next_tok++;
        rel.desc_shape = r % 2;
        const int window = spec.n_object_entities - spec.objects_per_relation;
        rel.obj_lo = window == 0 ? 0 : static_cast<int>(rng.below(static_cast<std::uint64_t>(window + 1)));
        rel.obj_hi = rel.obj_lo + spec.objects_per_relation;
        w.relations.push_back(rel);
    }
    w.relation_tok_hi = next_tok;

    w.entity_tok_lo = next_tok;
    auto make_entities = [&](int count) {
        std::vector<Entity> out;
        for (int i = 0; i < count; ++i) {
            Entity e;
            e.id = i;
            const int len = rng.range_int(1, 100) <= spec.two_token_entity_pct ? 2 : 1;
            for (int k = 0; k < len; ++k) {
                e.toks.push_back(next_tok++);
            }
            out.push_back(std::move(e));
        }
        return out;
    };
    w.subjects = make_entities(spec.n_subjects);
    w.objects = make_entities(spec.n_object_entities);
    w.entity_tok_hi = next_tok;
    if (next_tok > spec.vocab_size) {
        throw ConfigError("world spec: vocab_size " + std::to_string(spec.vocab_size) +
                          " too small for " + std::to_string(next_tok) + " surface tokens");
    }

    // invariant facts: a few invariant relations per subject
    for (int s = 0; s < spec.n_subjects; ++s) {
        std::vector<int> rels(static_cast<std::size_t>(spec.n_invariant_relations));
        for (int r = 0; r < spec.n_invariant_relations; ++r) {
            rels[static_cast<std::size_t>(r)] = r;
        }
        rng.shuffle(rels);
        for (int k = 0; k < spec.invariant_facts_per_subject; ++k) {
            const Relation& rel = w.relations[static_cast<std::size_t>(rels[static_cast<std::size_t>(k)])];
            KnowledgeTriple t;
            t.id = static_cast<int>(w.triples.size());
            t.subject = s;
            t.relation = rel.id;
            t.object = rel.obj_lo + static_cast<int>(rng.below(
                           static_cast<std::uint64_t>(rel.obj_hi - rel.obj_lo)));
            t.variant = false;
            t.role = TripleRole::Pretrain;
            w.triples.push_back(t);
        }
    }

    // variant facts on unique (subject, variant relation) slots, never pretrained
    std::vector<std::pair<int, int>> slots;
    for (int s = 0; s < spec.n_subjects; ++s) {
        for (int r = spec.n_invariant_relations; r < n_rel; ++r) {
            slots.emplace_back(s, r);
        }
    }
    rng.shuffle(slots);
    const int n_variant = spec.benchmark_candidates + spec.ta_train_pairs;
    for (int i = 0; i < n_variant; ++i) {
        const auto [s, r] = slots[static_cast<std::size_t>(i)];
        const Relation& rel = w.relations[static_cast<std::size_t>(r)];
        KnowledgeTriple t;
        t.id = static_cast<int>(w.triples.size());
        t.subject = s;
        t.relation = r;
        t.object = rel.obj_lo + static_cast<int>(rng.below(
                       static_cast<std::uint64_t>(rel.obj_hi - rel.obj_lo)));
        t.variant = true;
        t.role = i < spec.benchmark_candidates ? TripleRole::Bench : TripleRole::TaTrain;
        w.triples.push_back(t);
    }

    // pretraining corpus: descriptive and schematic renderings of every invariant fact
    for (const KnowledgeTriple& t : w.triples) {
        if (t.variant) {
            continue;
        }
        for (TaskForm form : {TaskForm::Descriptive, TaskForm::Schematic}) {
            const TaskInstance task = render_task(w, t, form);
            Document doc;
            doc.tokens = task.tokens;
            doc.span_lo = task.label_span.front();
            doc.span_hi = task.label_span.back() + 1;
            doc.triple_id = t.id;
            doc.uid = static_cast<int>(w.corpus.size());
            w.corpus.push_back(std::move(doc));
        }
    }
    return w;
}

// Evidence document: one informative sentence carrying the triple, surrounded
// by restatements of already-known invariant facts and filler tokens. Rendering
// is a pure function of (world seed, triple id).
inline Document render_evidence(const World& w, const KnowledgeTriple& t) {
    Rng rng(w.spec.seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(t.id) + 7)), 0xE1);
    const WorldSpec& spec = w.spec;

    const int lo = std::max(spec.distractor_min, spec.sentences_min - 1);
    const int hi = std::min(spec.distractor_max, spec.sentences_max - 1);
    if (lo > hi) {
        throw ConfigError("render_evidence: infeasible sentence/distractor ranges");
    }
    const int n_distractors = rng.range_int(lo, hi);

    std::vector<int> invariant_ids;
    for (const KnowledgeTriple& k : w.triples) {
        if (!k.variant) {
            invariant_ids.push_back(k.id);
        }
    }
    if (invariant_ids.empty()) {
        throw ConfigError("render_evidence: world has no invariant facts");
    }

    struct Sentence {
        std::vector<int> toks;
        int span_lo = -1, span_hi = -1;
        bool informative = false;
    };
    std::vector<Sentence> sentences;
    {
        Sentence s;
        s.informative = true;
        s.toks = render_sentence(w, t, TaskForm::Descriptive, &s.span_lo, &s.span_hi);
        sentences.push_back(std::move(s));
    }
    for (int i = 0; i < n_distractors; ++i) {
        const int pick = static_cast<int>(rng.below(invariant_ids.size()));
        Sentence s;
        s.toks = render_sentence(w, w.triple(invariant_ids[static_cast<std::size_t>(pick)]),
                                 TaskForm::Descriptive);
        sentences.push_back(std::move(s));
    }
    // filler prefix tokens make some positions genuinely unpredictable
    for (Sentence& s : sentences) {
        const int n_fill = rng.range_int(0, 2);
        std::vector<int> fill;
        for (int i = 0; i < n_fill; ++i) {
            fill.push_back(w.filler_lo + static_cast<int>(rng.below(
                               static_cast<std::uint64_t>(w.filler_hi - w.filler_lo))));
        }
        if (s.span_lo >= 0) {
            s.span_lo += n_fill;
            s.span_hi += n_fill;
        }
        fill.insert(fill.end(), s.toks.begin(), s.toks.end());
        s.toks = std::move(fill);
    }
    rng.shuffle(sentences);

    Document doc;
    doc.triple_id = t.id;
    doc.uid = 1 << 20 | t.id;  // distinct from corpus uids
    doc.tokens.push_back(w.tok_bos);
    for (const Sentence& s : sentences) {
        if (s.informative) {
            doc.span_lo = static_cast<int>(doc.tokens.size()) + s.span_lo;
            doc.span_hi = static_cast<int>(doc.tokens.size()) + s.span_hi;
        }
        doc.tokens.insert(doc.tokens.end(), s.toks.begin(), s.toks.end());
    }
    if (static_cast<int>(doc.tokens.size()) > spec.max_doc_len) {
        throw NumericError("render_evidence: document exceeds max_doc_len");
    }
    return doc;
}

inline std::string World::token_name(int t) const {
    if (t == tok_bos) {
        return "<s>";
    }
    if (t == tok_period) {
        return ".";
    }
    if (t == tok_ans) {
        return "=>";
    }
    if (t >= filler_lo && t < filler_hi) {
        return "f" + std::to_string(t - filler_lo);
    }
    if (t >= relation_tok_lo && t < relation_tok_hi) {
        const int idx = t - relation_tok_lo;
        return "r" + std::to_string(idx / 2) + (idx % 2 == 0 ? "a" : "b");
    }
    if (t >= entity_tok_lo && t < entity_tok_hi) {
        for (const auto* pool : {&subjects, &objects}) {
            for (const Entity& e : *pool) {
                for (std::size_t k = 0; k < e.toks.size(); ++k) {
                    if (e.toks[k] == t) {
                        std::string base = (pool == &subjects ? "s" : "o") + std::to_string(e.id);
                        return e.toks.size() == 1 ? base
                                                  : base + static_cast<char>('a' + static_cast<int>(k));
                    }
                }
            }
        }
    }
    return "t" + std::to_string(t);
}

// --- world file -------------------------------------------------------------
//
// Line-oriented text: a spec block, then one line per relation, entity, and
// triple. The file is the source of truth when loading.

inline void save_world(const World& w, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw ConfigError("cannot open world file for writing: " + path);
    }
    const WorldSpec& s = w.spec;
    f << "taalm-world 1\n";
    f << "spec " << s.n_subjects << ' ' << s.n_object_entities << ' ' << s.objects_per_relation
      << ' ' << s.n_invariant_relations << ' ' << s.n_variant_relations << ' '
      << s.invariant_facts_per_subject << ' ' << s.vocab_size << ' ' << s.seed << ' '
      << s.sentences_min << ' ' << s.sentences_max << ' ' << s.distractor_min << ' '
      << s.distractor_max << ' ' << s.two_token_entity_pct << ' ' << s.benchmark_candidates << ' '
      << s.ta_train_pairs << ' ' << s.n_filler_tokens << ' ' << s.max_doc_len << '\n';
    f << "tokens bos=0 period=1 ans=2 filler=" << w.filler_lo << ':' << w.filler_hi
      << " relation=" << w.relation_tok_lo << ':' << w.relation_tok_hi
      << " entity=" << w.entity_tok_lo << ':' << w.entity_tok_hi << '\n';
    f << "relations " << w.relations.size() << '\n';
    for (const Relation& r : w.relations) {
        f << "r " << r.id << ' ' << (r.variant ? 1 : 0) << ' ' << r.cue_a << ' ' << r.cue_b << ' '
          << r.obj_lo << ' ' << r.obj_hi << ' ' << r.desc_shape << '\n';
    }
    f << "subjects " << w.subjects.size() << '\n';
    for (const Entity& e : w.subjects) {
        f << "s " << e.id;
        for (int t : e.toks) {
            f << ' ' << t;
        }
        f << '\n';
    }
    f << "objects " << w.objects.size() << '\n';
    for (const Entity& e : w.objects) {
        f << "o " << e.id;
        for (int t : e.toks) {
            f << ' ' << t;
        }
        f << '\n';
    }
    f << "triples " << w.triples.size() << '\n';
    for (const KnowledgeTriple& t : w.triples) {
        f << "t " << t.id << ' ' << t.subject << ' ' << t.relation << ' ' << t.object << ' '
          << (t.variant ? 1 : 0) << ' '
          << (t.role == TripleRole::Pretrain ? "pretrain"
                                             : (t.role == TripleRole::Bench ? "bench" : "ta"))
          << '\n';
    }
    f << "end\n";
    if (!f) {
        throw ConfigError("failed writing world file: " + path);
    }
}

inline World load_world(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw ConfigError("cannot open world file: " + path);
    }
    std::string line, word;
    if (!std::getline(f, line) || line != "taalm-world 1") {
        throw ConfigError("not a world file (bad header): " + path);
    }
    World w;
    WorldSpec& s = w.spec;
    {
        std::getline(f, line);
        std::istringstream is(line);
        is >> word >> s.n_subjects >> s.n_object_entities >> s.objects_per_relation >>
            s.n_invariant_relations >> s.n_variant_relations >> s.invariant_facts_per_subject >>
            s.vocab_size >> s.seed >> s.sentences_min >> s.sentences_max >> s.distractor_min >>
            s.distractor_max >> s.two_token_entity_pct >> s.benchmark_candidates >>
            s.ta_train_pairs >> s.n_filler_tokens >> s.max_doc_len;
        if (word != "spec" || !is) {
            throw ConfigError("world file: malformed spec line");
        }
    }
    {
        std::getline(f, line);
        std::istringstream is(line);
        is >> word;
        if (word != "tokens") {
            throw ConfigError("world file: missing tokens line");
        }
        auto parse_range = [&](const std::string& item, int& lo, int& hi) {
            const auto eq = item.find('=');
            const auto colon = item.find(':');
            if (eq == std::string::npos || colon == std::string::npos) {
                throw ConfigError("world file: malformed token range " + item);
            }
            lo = std::stoi(item.substr(eq + 1, colon - eq - 1));
            hi = std::stoi(item.substr(colon + 1));
        };
        std::string item;
        is >> item >> item >> item;  // bos/period/ans are fixed ids
        is >> item;
        parse_range(item, w.filler_lo, w.filler_hi);
        is >> item;
        parse_range(item, w.relation_tok_lo, w.relation_tok_hi);
        is >> item;
        parse_range(item, w.entity_tok_lo, w.entity_tok_hi);
    }
    auto read_count = [&](const char* name) {
        std::getline(f, line);
        std::istringstream is(line);
        std::size_t n = 0;
        is >> word >> n;
        if (word != name || !is) {
            throw ConfigError(std::string("world file: expected ") + name + " count");
        }
        return n;
    };
    const std::size_t n_rel = read_count("relations");
    for (std::size_t i = 0; i < n_rel; ++i) {
        std::getline(f, line);
        std::istringstream is(line);
        Relation r;
        int variant = 0;
        is >> word >> r.id >> variant >> r.cue_a >> r.cue_b >> r.obj_lo >> r.obj_hi >> r.desc_shape;
        if (word != "r" || !is) {
            throw ConfigError("world file: malformed relation line");
        }
        r.variant = variant != 0;
        w.relations.push_back(r);
    }
    auto read_entities = [&](const char* section, const char* tag, std::vector<Entity>& out) {
        const std::size_t n = read_count(section);
        for (std::size_t i = 0; i < n; ++i) {
            std::getline(f, line);
            std::istringstream is(line);
            Entity e;
            is >> word >> e.id;
            if (word != tag || !is) {
                throw ConfigError("world file: malformed entity line");
            }
            int t;
            while (is >> t) {
                e.toks.push_back(t);
            }
            out.push_back(std::move(e));
        }
    };
    read_entities("subjects", "s", w.subjects);
    read_entities("objects", "o", w.objects);
    const std::size_t n_triples = read_count("triples");
    for (std::size_t i = 0; i < n_triples; ++i) {
        std::getline(f, line);
        std::istringstream is(line);
        KnowledgeTriple t;
        int variant = 0;
        std::string role;
        is >> word >> t.id >> t.subject >> t.relation >> t.object >> variant >> role;
        if (word != "t" || !is) {
            throw ConfigError("world file: malformed triple line");
        }
        t.variant = variant != 0;
        t.role = role == "pretrain" ? TripleRole::Pretrain
                                    : (role == "bench" ? TripleRole::Bench : TripleRole::TaTrain);
        w.triples.push_back(t);
    }
    std::getline(f, line);
    if (line != "end") {
        throw ConfigError("world file: missing end marker");
    }
    // rebuild the pretraining corpus (a pure function of the lists above)
    for (const KnowledgeTriple& t : w.triples) {
        if (t.variant) {
            continue;
        }
        for (TaskForm form : {TaskForm::Descriptive, TaskForm::Schematic}) {
            const TaskInstance task = render_task(w, t, form);
            Document doc;
            doc.tokens = task.tokens;
            doc.span_lo = task.label_span.front();
            doc.span_hi = task.label_span.back() + 1;
            doc.triple_id = t.id;
            doc.uid = static_cast<int>(w.corpus.size());
            w.corpus.push_back(std::move(doc));
        }
    }
    return w;
}

}  // namespace taalm
