#include "kvprune/bench.hpp"
#include "kvprune/checkpoint_io.hpp"
#include "kvprune/cli.hpp"
#include "kvprune/errors.hpp"
#include "kvprune/scoring.hpp"
#include "kvprune/sensitivity.hpp"
#include "kvprune/surgery.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

namespace py = pybind11;
using namespace kvprune;

namespace {

py::array_t<double> to_numpy(const Matrix & m) {
    py::array_t<double> a({m.rows(), m.cols()});
    std::copy(m.values().begin(), m.values().end(), a.mutable_data());
    return a;
}

Corpus corpus_from(const std::string & path, double train, double calibration, double eval, uint64_t seed) {
    return load_corpus(path, {train, calibration, eval}, seed);
}

} // namespace

PYBIND11_MODULE(_kvprune, m) {
    m.doc() = "KV-channel pruning toolkit core";

    static py::exception<Error> error(m, "Error");
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) {
                std::rethrow_exception(p);
            }
        } catch (const Error & e) {
            PyErr_SetString(error.ptr(), e.what());
        }
    });

    py::enum_<ScaleMode>(m, "ScaleMode")
        .value("fixed_original", ScaleMode::fixed_original)
        .value("recomputed", ScaleMode::recomputed);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("n_blocks", &ModelConfig::n_blocks)
        .def_readwrite("n_heads", &ModelConfig::n_heads)
        .def_readwrite("base_head_dim", &ModelConfig::base_head_dim)
        .def_readwrite("ffn_hidden", &ModelConfig::ffn_hidden)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_readwrite("scale_mode", &ModelConfig::scale_mode)
        .def_readonly("vocab_size", &ModelConfig::vocab_size)
        .def("validate", &ModelConfig::validate);

    py::class_<Checkpoint>(m, "Checkpoint")
        .def_readonly("config", &Checkpoint::config)
        .def("parameter_count", &Checkpoint::parameter_count)
        .def("channels", [](const Checkpoint & c) {
            std::vector<size_t> out;
            for (const auto & b : c.weights.blocks) {
                out.push_back(b.channels());
            }
            return out;
        })
        .def("hash", [](const Checkpoint & c) { return checkpoint_hash(c); })
        .def("weights_hash", [](const Checkpoint & c) { return weights_hash(c); });

    m.def("init_checkpoint", &init_checkpoint, py::arg("config"), py::arg("seed") = 0);
    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
    m.def("save_checkpoint", [](const std::string & path, const Checkpoint & c) { save_checkpoint(path, c); },
          py::arg("path"), py::arg("checkpoint"));
    m.def("content_hash", [](py::bytes b) { return content_hash(std::string(b)); });

    m.def("encode", &encode);
    m.def("decode", &decode);
    m.def(
        "forward",
        [](const Checkpoint & c, const std::vector<int> & tokens) {
            return to_numpy(forward(c, tokens, 1, tokens.size()));
        },
        py::arg("checkpoint"), py::arg("tokens"), "logits for one sequence, shape (len, vocab)");
    m.def(
        "generate",
        [](const Checkpoint & c, const std::vector<int> & prompt, size_t n_new, bool use_cache) {
            return generate(c, prompt, n_new, use_cache);
        },
        py::arg("checkpoint"), py::arg("prompt"), py::arg("n_new"), py::arg("use_cache") = true);
    m.def(
        "eval_ppl",
        [](const Checkpoint & c, const std::string & path, size_t seq_len, uint64_t seed) {
            return eval_ppl(c, corpus_from(path, 0.8, 0.08, 0.12, seed), Split::eval, seq_len);
        },
        py::arg("checkpoint"), py::arg("corpus_path"), py::arg("seq_len") = 64, py::arg("seed") = 0);

    m.def("allocate_uniform", [](double p, size_t n) { return allocate_uniform(p, n).ratios; });
    m.def(
        "allocate_ppl_based",
        [](const std::vector<double> & d, double p, double eps) { return allocate_ppl_based(d, p, eps).ratios; },
        py::arg("delta_ppl"), py::arg("p_total"), py::arg("epsilon") = kDefaultEpsilon);
    m.def(
        "allocate_rank_based",
        [](const std::vector<double> & d, double p) {
            return allocate_rank_based(ascending_ranks(d), p, "delta-ppl").ratios;
        },
        py::arg("delta_ppl"), py::arg("p_total"));

    m.def(
        "prune_l1",
        [](const Checkpoint & c, const std::vector<double> & ratios) {
            PruningPlan plan;
            plan.allocator = Allocator::ppl_based;
            plan.ratios = ratios;
            return apply_mask(c, select_mask(averaged_scores(score_l1(c)), plan)).first;
        },
        py::arg("checkpoint"), py::arg("ratios"), "remove the lowest-L1 channels per block");
    m.def(
        "kv_bytes",
        [](const Checkpoint & c, size_t batch, size_t seq_len, size_t bytes) {
            return kv_bytes(c, batch, seq_len ? seq_len : c.config.max_seq_len, bytes);
        },
        py::arg("checkpoint"), py::arg("batch") = 1, py::arg("seq_len") = 0, py::arg("bytes_per_element") = 2);

    m.def(
        "run_cli",
        [](const std::vector<std::string> & args) {
            std::ostringstream out, err;
            const int code = run_cli(args, out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "run a CLI command; returns (exit_code, stdout, stderr)");
}
