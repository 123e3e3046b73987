#pragma once

#include <algorithm>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "taalm/meta.hpp"
#include "taalm/providers.hpp"
#include "taalm/twl.hpp"
#include "taalm/world.hpp"

namespace taalm {

// Micro accuracy: correctly predicted label tokens over all label tokens.
template <typename T>
double set_accuracy(const ParamSet<T>& theta, const TransformerConfig& cfg,
                    std::span<const TaskInstance> tasks) {
    long long hits = 0, total = 0;
    for (const TaskInstance& task : tasks) {
        const auto r = predict_labels(theta, cfg, task.tokens, task.label_span);
        for (bool c : r.correct) {
            hits += c ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

template <typename T>
double unit_accuracy(const ParamSet<T>& theta, const TransformerConfig& cfg,
                     const TaskInstance& task) {
    return predict_labels(theta, cfg, task.tokens, task.label_span).accuracy();
}

// --- pretraining --------------------------------------------------------------

template <typename T>
struct PretrainConfig {
    T lr = T(3e-3);
    int batch = 16;
    int max_steps = 6000;
    int eval_every = 100;
    double gate_accuracy = 0.98;
    int probe_size = 128;  // invariant triples probed per evaluation
    std::uint64_t init_seed = 2;
    std::uint64_t shuffle_seed = 3;
};

template <typename T>
struct PretrainResult {
    ParamSet<T> theta0;
    double descriptive_accuracy = 0;
    double schematic_accuracy = 0;
    int steps_run = 0;
};

// Trains a fresh LM on the invariant corpus until both task forms clear the
// accuracy gate on a probe sample; running out of budget is an error.
template <typename T>
PretrainResult<T> pretrain_world(const World& world, const TransformerConfig& cfg,
                                 const PretrainConfig<T>& pc) {
    if (world.corpus.empty()) {
        throw ConfigError("pretrain: empty corpus");
    }
    ParamSet<T> theta = init_params<T>(cfg, pc.init_seed);

    std::vector<TaskInstance> probe_desc, probe_schem;
    for (const KnowledgeTriple& t : world.triples) {
        if (t.variant) {
            continue;
        }
        if (static_cast<int>(probe_desc.size()) >= pc.probe_size) {
            break;
        }
        probe_desc.push_back(render_task(world, t, TaskForm::Descriptive));
        probe_schem.push_back(render_task(world, t, TaskForm::Schematic));
    }

    Rng rng(pc.shuffle_seed, 0x9e);
    std::vector<std::size_t> order(world.corpus.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();

    AdamState<T> adam;
    FinetuneHyper<T> hp;
    hp.adam.lr = pc.lr;
    PretrainResult<T> result;
    for (int step = 0; step < pc.max_steps; ++step) {
        std::vector<WeightedDoc<T>> batch;
        for (int b = 0; b < pc.batch; ++b) {
            if (cursor >= order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            const Document& doc = world.corpus[order[cursor++]];
            batch.push_back(
                {doc.tokens, TokenWeights<T>{std::vector<T>(doc.tokens.size() - 1, T(1))}});
        }
        finetune_step<T>(theta, cfg, batch, adam, hp);
        result.steps_run = step + 1;
        if ((step + 1) % pc.eval_every == 0) {
            result.descriptive_accuracy = set_accuracy(theta, cfg, probe_desc);
            result.schematic_accuracy = set_accuracy(theta, cfg, probe_schem);
            if (result.descriptive_accuracy >= pc.gate_accuracy &&
                result.schematic_accuracy >= pc.gate_accuracy) {
                result.theta0 = std::move(theta);
                return result;
            }
        }
    }
    result.descriptive_accuracy = set_accuracy(theta, cfg, probe_desc);
    result.schematic_accuracy = set_accuracy(theta, cfg, probe_schem);
    throw BudgetError("pretraining missed the " + std::to_string(pc.gate_accuracy) +
                      " accuracy gate within " + std::to_string(pc.max_steps) +
                      " steps (descriptive " + std::to_string(result.descriptive_accuracy) +
                      ", schematic " + std::to_string(result.schematic_accuracy) + ")");
}

// --- benchmark sample -----------------------------------------------------------

struct CklUnit {
    int triple_id = -1;
    Document evidence;
    TaskInstance task;  // descriptive form, used during the test phase
};

struct BenchmarkSample {
    std::vector<CklUnit> to_learn;
    std::vector<TaskInstance> not_forget;
};

// Applies the accuracy filters: to-learn units measure exactly 0 under theta0,
// not-to-forget units exactly 1. Which qualifying units are kept is drawn from
// the tie-break stream; the training order is the data loader's concern.
template <typename T>
BenchmarkSample sample_benchmark(const ParamSet<T>& theta0, const TransformerConfig& cfg,
                                 const World& world, int n, std::uint64_t tiebreak_seed) {
    if (n < 1) {
        throw ConfigError("sample_benchmark: n must be positive");
    }
    std::vector<int> learn_pool, forget_pool;
    for (const KnowledgeTriple& t : world.triples) {
        if (t.role == TripleRole::Bench) {
            if (unit_accuracy(theta0, cfg, render_task(world, t, TaskForm::Descriptive)) == 0.0) {
                learn_pool.push_back(t.id);
            }
        } else if (t.role == TripleRole::Pretrain) {
            if (unit_accuracy(theta0, cfg, render_task(world, t, TaskForm::Descriptive)) == 1.0) {
                forget_pool.push_back(t.id);
            }
        }
    }
    if (static_cast<int>(learn_pool.size()) < n || static_cast<int>(forget_pool.size()) < n) {
        throw NumericError("sample_benchmark: insufficient qualifying triples (to-learn " +
                           std::to_string(learn_pool.size()) + ", not-to-forget " +
                           std::to_string(forget_pool.size()) + ", requested " + std::to_string(n) +
                           " each)");
    }
    Rng rng(tiebreak_seed, 0x5b);
    rng.shuffle(learn_pool);
    rng.shuffle(forget_pool);
    learn_pool.resize(static_cast<std::size_t>(n));
    forget_pool.resize(static_cast<std::size_t>(n));
    std::sort(learn_pool.begin(), learn_pool.end());
    std::sort(forget_pool.begin(), forget_pool.end());

    BenchmarkSample sample;
    for (int id : learn_pool) {
        CklUnit unit;
        unit.triple_id = id;
        unit.evidence = render_evidence(world, world.triple(id));
        unit.task = render_task(world, world.triple(id), TaskForm::Descriptive);
        sample.to_learn.push_back(std::move(unit));
    }
    for (int id : forget_pool) {
        sample.not_forget.push_back(render_task(world, world.triple(id), TaskForm::Descriptive));
    }
    return sample;
}

// --- evaluation loop -------------------------------------------------------------

struct CklCurve {
    double epoch0_to_learn = 0;
    double epoch0_nf = 0;
    std::vector<double> to_learn_acc;  // entry e: accuracy after training epoch e+1
    std::vector<double> nf_acc;
};

struct CklMetrics {
    double top_acc = 0;
    int epoch = 1;  // 1-based, first occurrence of the maximum
    double nf_acc = 0;
    double total_knowledge = 0;
};

inline CklMetrics compute_metrics(const CklCurve& curve) {
    if (curve.to_learn_acc.empty() || curve.to_learn_acc.size() != curve.nf_acc.size()) {
        throw NumericError("compute_metrics: empty or mismatched curve");
    }
    CklMetrics m;
    std::size_t best = 0;
    for (std::size_t e = 1; e < curve.to_learn_acc.size(); ++e) {
        if (curve.to_learn_acc[e] > curve.to_learn_acc[best]) {
            best = e;
        }
    }
    m.top_acc = curve.to_learn_acc[best];
    m.epoch = static_cast<int>(best) + 1;
    m.nf_acc = curve.nf_acc[best];
    m.total_knowledge = m.top_acc + m.nf_acc;
    return m;
}

template <typename T>
struct CklRunParams {
    T lr = T(1e-4);
    int batch = 4;
    int epochs = 30;
    std::uint64_t shuffle_seed = 42;
    double review_ratio = 0.0;      // > 0 enables rehearsal from the corpus
    T anchor_lambda = T(0);         // > 0 anchors theta to theta0
};

// One full benchmark run: per epoch, train once over all to-learn evidence
// (shuffled, optionally interleaved with replay), then measure both accuracies.
// theta0 is copied, never mutated.
template <typename T>
CklCurve run_ckl(const ParamSet<T>& theta0, const TransformerConfig& cfg,
                 WeightProvider<T>& provider, const BenchmarkSample& sample, const World& world,
                 const CklRunParams<T>& rp) {
    if (rp.epochs < 1) {
        throw ConfigError("run_ckl: epochs must be positive");
    }
    if (sample.to_learn.empty()) {
        throw ConfigError("run_ckl: empty to-learn set");
    }
    std::vector<TaskInstance> learn_tasks;
    for (const CklUnit& u : sample.to_learn) {
        learn_tasks.push_back(u.task);
    }

    ParamSet<T> theta = theta0;
    AdamState<T> adam;
    FinetuneHyper<T> hp;
    hp.adam.lr = rp.lr;
    hp.anchor_lambda = rp.anchor_lambda;
    hp.anchor = rp.anchor_lambda > T(0) ? &theta0 : nullptr;

    CklCurve curve;
    curve.epoch0_to_learn = set_accuracy(theta, cfg, learn_tasks);
    curve.epoch0_nf = set_accuracy(theta, cfg, sample.not_forget);

    Rng loader(rp.shuffle_seed, 0xd1);
    for (int epoch = 0; epoch < rp.epochs; ++epoch) {
        Rng epoch_rng = loader.fork(static_cast<std::uint64_t>(epoch));
        const auto stream =
            rehearsal_mix(sample.to_learn.size(), world.corpus.size(), rp.review_ratio, epoch_rng);
        std::size_t i = 0;
        while (i < stream.size()) {
            std::vector<WeightedDoc<T>> batch;
            for (int b = 0; b < rp.batch && i < stream.size(); ++b, ++i) {
                const Document& doc = stream[i].is_replay
                                          ? world.corpus[stream[i].index]
                                          : sample.to_learn[stream[i].index].evidence;
                batch.push_back({doc.tokens, provider.weights(theta, doc)});
            }
            finetune_step<T>(theta, cfg, batch, adam, hp);
        }
        curve.to_learn_acc.push_back(set_accuracy(theta, cfg, learn_tasks));
        curve.nf_acc.push_back(set_accuracy(theta, cfg, sample.not_forget));
    }
    return curve;
}

// --- method registry ----------------------------------------------------------

struct MethodSpec {
    std::string base;       // uniform | ta | oracle | rho1
    double drop_k = 0.0;    // ta ablations
    bool mask = false;
    bool rehearsal = false;
    bool l2_anchor = false;

    static MethodSpec parse(const std::string& name) {
        static const std::vector<std::string> known = {
            "uniform",  "ta",        "oracle",       "rho1",          "ta+mask",
            "ta+drop50", "ta+drop80", "ta+rehearsal", "uniform+l2anchor", "uniform+rehearsal"};
        if (std::find(known.begin(), known.end(), name) == known.end()) {
            throw ConfigError("unknown method '" + name + "'");
        }
        MethodSpec m;
        std::string rest = name;
        const auto plus = rest.find('+');
        m.base = rest.substr(0, plus);
        if (plus != std::string::npos) {
            const std::string mod = rest.substr(plus + 1);
            if (mod == "mask") {
                m.mask = true;
            } else if (mod == "drop50") {
                m.drop_k = 50.0;
            } else if (mod == "drop80") {
                m.drop_k = 80.0;
            } else if (mod == "rehearsal") {
                m.rehearsal = true;
            } else if (mod == "l2anchor") {
                m.l2_anchor = true;
            }
        }
        return m;
    }

    bool needs_phi() const { return base == "ta"; }
};

template <typename T>
std::unique_ptr<WeightProvider<T>> make_provider(const MethodSpec& m, const TransformerConfig& cfg,
                                                 const ParamSet<T>& theta0, T rho1_ratio,
                                                 const ParamSet<T>* phi,
                                                 const TransformerConfig* ta_cfg) {
    if (m.base == "uniform") {
        return std::make_unique<UniformProvider<T>>();
    }
    if (m.base == "oracle") {
        return std::make_unique<OracleProvider<T>>();
    }
    if (m.base == "rho1") {
        return std::make_unique<Rho1Provider<T>>(theta0, cfg, rho1_ratio);
    }
    if (m.base == "ta") {
        if (phi == nullptr || ta_cfg == nullptr) {
            throw ConfigError("method '" + m.base + "' requires a trained Train-Attention");
        }
        if (m.drop_k > 0.0 || m.mask) {
            return std::make_unique<AblatedTaProvider<T>>(*phi, *ta_cfg, cfg, m.drop_k, m.mask);
        }
        return std::make_unique<FrozenTaProvider<T>>(*phi, *ta_cfg);
    }
    throw ConfigError("unknown provider base '" + m.base + "'");
}

// --- meta pairs for TA training --------------------------------------------------

// Pairs use the evidence document and the schematic task form; pairs whose task
// theta0 already solves better than the accuracy threshold are filtered out.
template <typename T>
std::vector<MetaPair> build_ta_pairs(const World& world, const ParamSet<T>& theta0,
                                     const TransformerConfig& cfg, double max_accuracy = 0.5) {
    std::vector<MetaPair> pairs;
    for (const KnowledgeTriple& t : world.triples) {
        if (t.role != TripleRole::TaTrain) {
            continue;
        }
        const TaskInstance task = render_task(world, t, TaskForm::Schematic);
        if (unit_accuracy(theta0, cfg, task) >= max_accuracy) {
            continue;
        }
        MetaPair p;
        p.evidence = render_evidence(world, world.triple(t.id)).tokens;
        p.task_tokens = task.tokens;
        p.task_label_positions = task.label_span;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace taalm
