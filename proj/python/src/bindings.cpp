#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sentinel/error.hpp"
#include "sentinel/evaluation.hpp"
#include "sentinel/features.hpp"
#include "sentinel/labeling.hpp"
#include "sentinel/stream.hpp"
#include "sentinel/synthgen.hpp"
#include "sentinel/trace.hpp"
#include "sentinel/trees.hpp"

namespace py = pybind11;
using namespace sentinel;

namespace {

SparseVector to_sparse(const std::map<std::uint32_t, double>& features) {
  SparseVector v;
  for (const auto& [col, value] : features)
    if (value != 0) v.push_back({col, value});
  return v;
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["accuracy"] = m.accuracy;
  d["precision"] = m.precision;
  d["recall"] = m.recall;
  d["f1"] = m.f1;
  return d;
}

}  // namespace

PYBIND11_MODULE(_sentinel, m) {
  m.doc() = "Syscall n-gram malware classification core";
  m.attr("__version__") = SENTINEL_VERSION;

  auto base = py::register_exception<Error>(m, "SentinelError", PyExc_RuntimeError);
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<InvalidArgument>(m, "InvalidArgument", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<VocabularyMismatch>(m, "VocabularyMismatch", base.ptr());
  py::register_exception<VersionError>(m, "VersionError", base.ptr());
  py::register_exception<CorruptionError>(m, "CorruptionError", base.ptr());

  py::class_<SyscallEvent>(m, "SyscallEvent")
      .def(py::init<std::int64_t, std::int32_t, std::string, std::string>(), py::arg("ts_ns"), py::arg("pid"),
           py::arg("comm"), py::arg("syscall"))
      .def_readwrite("ts_ns", &SyscallEvent::ts_ns)
      .def_readwrite("pid", &SyscallEvent::pid)
      .def_readwrite("comm", &SyscallEvent::comm)
      .def_readwrite("syscall", &SyscallEvent::syscall)
      .def(py::self == py::self)
      .def("__repr__", [](const SyscallEvent& e) {
        return "SyscallEvent(" + std::to_string(e.ts_ns) + ", " + std::to_string(e.pid) + ", '" + e.comm + "', '" +
               e.syscall + "')";
      });

  py::class_<TraceMeta>(m, "TraceMeta")
      .def(py::init<>())
      .def_readwrite("trace_id", &TraceMeta::trace_id)
      .def_readwrite("duration_ns", &TraceMeta::duration_ns)
      .def_readwrite("inject_ts_ns", &TraceMeta::inject_ts_ns)
      .def_readwrite("class_label", &TraceMeta::class_label)
      .def_property(
          "scenario", [](const TraceMeta& t) { return std::string(to_string(t.scenario)); },
          [](TraceMeta& t, const std::string& s) { t.scenario = parse_scenario(s); })
      .def(py::self == py::self);

  py::class_<Trace>(m, "Trace")
      .def(py::init<>())
      .def_readwrite("meta", &Trace::meta)
      .def_readwrite("events", &Trace::events)
      .def("syscalls",
           [](const Trace& t) {
             std::vector<std::string> out;
             out.reserve(t.events.size());
             for (const auto& e : t.events) out.push_back(e.syscall);
             return out;
           })
      .def(py::self == py::self)
      .def("__len__", [](const Trace& t) { return t.events.size(); });

  m.def("read_trace", py::overload_cast<const std::filesystem::path&>(&read_trace), py::arg("path"));
  m.def("write_trace", py::overload_cast<const Trace&, const std::filesystem::path&>(&write_trace),
        py::arg("trace"), py::arg("path"));
  m.def("default_syscalls", [] { return default_syscall_set().names(); });

  m.def(
      "extract_ngrams",
      [](const std::vector<std::string>& calls, std::size_t n) {
        std::vector<SyscallEvent> ev;
        ev.reserve(calls.size());
        for (std::size_t i = 0; i < calls.size(); ++i) ev.push_back({static_cast<std::int64_t>(i), 0, "", calls[i]});
        py::dict out;
        for (const auto& [gram, count] : extract_ngrams(ev, n)) out[py::tuple(py::cast(gram))] = count;
        return out;
      },
      py::arg("calls"), py::arg("n"), "n-gram counts of a call-name sequence, keyed by tuples");

  m.def(
      "label_slices",
      [](const TraceMeta& meta, std::size_t num_slices) {
        std::vector<std::string> out;
        for (const auto& l : label_slices(meta, num_slices)) out.push_back(to_string(l));
        return out;
      },
      py::arg("meta"), py::arg("num_slices") = 10);

  m.def(
      "consensus_class",
      [](const std::string& report_json) { return consensus_class(parse_scan_report(report_json), default_alias_table()); },
      py::arg("report_json"));

  m.def(
      "generate_trace",
      [](const std::string& scenario, const std::optional<std::string>& class_name, const std::string& trace_id,
         std::uint64_t seed) {
        return generate_trace(default_scenario(parse_scenario(scenario), seed), class_name, trace_id).trace;
      },
      py::arg("scenario"), py::arg("class_name"), py::arg("trace_id"), py::arg("seed") = 0);

  m.def(
      "metrics",
      [](const std::vector<std::string>& classes, const std::vector<std::vector<std::uint64_t>>& counts,
         const std::string& averaging) {
        return metrics_dict(metrics(ConfusionMatrix(classes, counts), parse_averaging(averaging)));
      },
      py::arg("classes"), py::arg("counts"), py::arg("averaging") = "macro",
      "Accuracy and averaged precision/recall/F1 of a confusion matrix (rows = truth); None means NA.");

  py::class_<NGramVocabulary>(m, "Vocabulary")
      .def_static("load", py::overload_cast<const std::filesystem::path&>(&read_vocabulary), py::arg("path"))
      .def_property_readonly("n", &NGramVocabulary::n)
      .def_property_readonly("hash", &NGramVocabulary::hash)
      .def_property_readonly("ngrams", &NGramVocabulary::ngrams)
      .def("column", &NGramVocabulary::column, py::arg("ngram"))
      .def("__len__", &NGramVocabulary::size);

  py::class_<TreeEnsembleModel>(m, "Model")
      .def_static("load", py::overload_cast<const std::filesystem::path&>(&load_model), py::arg("path"))
      .def("save", [](const TreeEnsembleModel& model, const std::filesystem::path& p) { save_model(model, p); })
      .def_property_readonly("kind", [](const TreeEnsembleModel& model) { return std::string(to_string(model.kind)); })
      .def_readonly("classes", &TreeEnsembleModel::classes)
      .def_readonly("vocab_hash", &TreeEnsembleModel::vocab_hash)
      .def_readonly("hyperparams", &TreeEnsembleModel::hyperparams)
      .def_property_readonly("num_trees", [](const TreeEnsembleModel& model) { return model.trees.size(); })
      .def(
          "predict",
          [](const TreeEnsembleModel& model, const std::map<std::uint32_t, double>& features) {
            auto p = predict(model, to_sparse(features));
            return py::make_tuple(p.class_name, p.scores);
          },
          py::arg("features"), "Class name and per-class scores for a {column: value} feature map.");

  m.def(
      "predict_windows",
      [](const std::filesystem::path& model_path, const std::filesystem::path& vocab_path, const Trace& trace,
         double window_s) {
        auto ctx = ClassifierContext::load(model_path, vocab_path);
        WindowConfig cfg{static_cast<std::int64_t>(window_s * 1e9), 0};
        std::vector<std::string> out;
        for (const auto& p : predict_trace_windows(*ctx, trace, cfg))
          out.push_back(format_prediction_record(ctx->model(), p));
        return out;
      },
      py::arg("model_path"), py::arg("vocab_path"), py::arg("trace"), py::arg("window_seconds") = 60.0,
      "Prediction records for consecutive windows of a trace, as the stream service emits them.");
}
