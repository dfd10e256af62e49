#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "dpe/active_learning.hpp"
#include "dpe/checkpoint.hpp"
#include "dpe/data.hpp"
#include "dpe/ensemble.hpp"
#include "dpe/error.hpp"
#include "dpe/prior.hpp"
#include "dpe/regularizer.hpp"

namespace py = pybind11;
using namespace dpe;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<long long, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<int> to_labels(const IntArray& y) {
  if (y.ndim() != 1) throw ConfigError("labels must be one-dimensional");
  return std::vector<int>(y.data(), y.data() + y.size());
}

py::tuple prior_tuple(const PriorSpec& p) { return py::make_tuple(p.mu_p, p.sigma2_p); }

ParameterGroup group_from(const Array& values, double mu_p, double sigma2_p) {
  if (values.ndim() != 2) throw ConfigError("values must be shaped (members, parameters)");
  return {"group", to_tensor(values), PriorSpec{mu_p, sigma2_p, "group"}};
}

py::tuple dataset_tuple(const Dataset& d) {
  py::array_t<long long> y(std::vector<py::ssize_t>{static_cast<py::ssize_t>(d.labels.size())});
  auto view = y.mutable_unchecked<1>();
  for (std::size_t i = 0; i < d.labels.size(); ++i)
    view(static_cast<py::ssize_t>(i)) = d.labels[i];
  return py::make_tuple(to_array(d.features), y);
}

Dataset dataset_from(const Array& x, const IntArray& y) {
  Dataset d;
  d.features = to_tensor(x);
  d.labels = to_labels(y);
  int max_label = -1;
  for (int v : d.labels) max_label = std::max(max_label, v);
  d.n_classes = static_cast<std::size_t>(max_label + 1);
  d.validate();
  return d;
}

Samples samples_from(const Array& x, const IntArray& y) {
  return Samples{to_tensor(x), to_labels(y)};
}

Shape shape_of(const std::vector<std::size_t>& input_shape) {
  return Shape(input_shape.begin(), input_shape.end());
}

// Thin handle over EnsembleModel.
struct PyEnsemble {
  EnsembleModel model;
};

py::list records_of(const TrainReport& report) {
  py::list out;
  for (const EpochRecord& r : report.epochs) {
    py::dict d;
    d["epoch"] = r.epoch;
    d["sum_ce"] = r.sum_ce;
    d["omega"] = r.omega;
    d["beta_omega"] = r.beta_omega;
    d["train_accuracy"] = r.train_accuracy;
    d["val_accuracy"] = r.val_accuracy ? py::cast(*r.val_accuracy) : py::none();
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Deep probabilistic ensembles (C++ core)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);

  m.attr("variance_floor") = kVarianceFloor;

  m.def("gaussian_kl", &gaussian_kl, py::arg("mu_q"), py::arg("var_q"), py::arg("mu_p"),
        py::arg("var_p"));
  m.def("conv_prior", [](std::size_t n_i, std::size_t n_o, std::size_t w, std::size_t h) {
    return prior_tuple(conv_prior(n_i, n_o, w, h));
  }, py::arg("n_in"), py::arg("n_out"), py::arg("kernel_w"), py::arg("kernel_h"),
        "(mean, variance) of the prior for a convolution weight");
  m.def("dense_prior", [](std::size_t n_in, std::size_t n_out, std::size_t spatial) {
    return prior_tuple(dense_prior(n_in, n_out, spatial));
  }, py::arg("n_in"), py::arg("n_out"), py::arg("spatial") = 1);
  m.def("batchnorm_prior", [](bool is_weight) { return prior_tuple(batchnorm_prior(is_weight)); },
        py::arg("is_weight"));
  m.def("bias_prior", [] { return prior_tuple(bias_prior()); });

  m.def("omega", [](const Array& values, double mu_p, double sigma2_p) {
    return omega_group(group_from(values, mu_p, sigma2_p));
  }, py::arg("values"), py::arg("mu_p"), py::arg("sigma2_p"),
        "Penalty of one (members, parameters) group under a Gaussian prior");
  m.def("omega_gradient", [](const Array& values, double mu_p, double sigma2_p) {
    const std::vector<ParameterGroup> groups{group_from(values, mu_p, sigma2_p)};
    return to_array(dpe::omega_gradient(groups)[0]);
  }, py::arg("values"), py::arg("mu_p"), py::arg("sigma2_p"));

  m.def("prediction_entropy", [](const Array& p) {
    if (p.ndim() != 1) throw ConfigError("expected a probability vector");
    return prediction_entropy(std::span<const double>(p.data(), p.size()));
  }, py::arg("probs"));
  m.def("acquire_top_k", [](const Array& scores, std::size_t k,
                            std::optional<std::vector<std::size_t>> positions) {
    if (scores.ndim() != 1) throw ConfigError("expected one score per position");
    std::vector<std::size_t> pos;
    if (positions) {
      pos = *positions;
    } else {
      pos.resize(scores.size());
      for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    }
    return top_k_by_score(pos, std::span<const double>(scores.data(), scores.size()), k);
  }, py::arg("scores"), py::arg("k"), py::arg("positions") = py::none(),
        "Positions of the k highest scores, ties to the lower position");
  m.def("relative_performance", &relative_performance, py::arg("accuracy"),
        py::arg("upper_bound"));

  m.def("gen_blobs", [](std::size_t n, std::size_t classes, std::size_t dim, double spread,
                        std::uint64_t seed) {
    return dataset_tuple(gen_blobs(n, classes, dim, spread, seed));
  }, py::arg("n"), py::arg("classes") = 4, py::arg("dim") = 2, py::arg("spread") = 3.4,
        py::arg("seed") = 9);
  m.def("gen_moons", [](std::size_t n, double noise, std::uint64_t seed) {
    return dataset_tuple(gen_moons(n, noise, seed));
  }, py::arg("n"), py::arg("noise") = 0.1, py::arg("seed") = 0);
  m.def("gen_spirals", [](std::size_t n, double noise, std::uint64_t seed) {
    return dataset_tuple(gen_spirals(n, noise, seed));
  }, py::arg("n"), py::arg("noise") = 0.1, py::arg("seed") = 0);

  py::class_<PyEnsemble>(m, "Ensemble")
      .def(py::init([](const std::string& layers, std::vector<std::size_t> input_shape,
                       std::size_t members, double beta, std::uint64_t seed) {
             return PyEnsemble{init_ensemble(parse_architecture(layers, shape_of(input_shape)),
                                             members, beta, seed)};
           }),
           py::arg("layers"), py::arg("input_shape"), py::arg("members") = 8,
           py::arg("beta") = 0.0, py::arg("seed") = 0)
      .def_property_readonly("size", [](const PyEnsemble& e) { return e.model.size(); })
      .def_property_readonly("beta", [](const PyEnsemble& e) { return e.model.beta; })
      .def_property_readonly("layers", [](const PyEnsemble& e) {
        return format_architecture(e.model.architecture());
      })
      .def("train", [](PyEnsemble& e, const Array& x, const IntArray& y, double lr,
                       double momentum, std::size_t batch_size, std::size_t epochs,
                       std::uint64_t seed, std::optional<double> beta, double weight_decay) {
             TrainConfig cfg;
             cfg.lr = lr;
             cfg.momentum = momentum;
             cfg.batch_size = batch_size;
             cfg.epochs = epochs;
             cfg.seed = seed;
             cfg.beta = beta;
             cfg.weight_decay = weight_decay;
             const Samples s = samples_from(x, y);
             TrainReport report;
             {
               py::gil_scoped_release release;
               report = train(e.model, s, cfg);
             }
             return records_of(report);
           },
           py::arg("x"), py::arg("y"), py::arg("lr") = 0.02, py::arg("momentum") = 0.9,
           py::arg("batch_size") = 32, py::arg("epochs") = 60, py::arg("seed") = 0,
           py::arg("beta") = py::none(), py::arg("weight_decay") = 0.0,
           "Runs SGD on the joint objective; returns one dict per epoch")
      .def("predict_mean", [](const PyEnsemble& e, const Array& x) {
        return to_array(predict_mean(e.model, to_tensor(x)));
      }, py::arg("x"))
      .def("omega", [](const PyEnsemble& e) { return measure_omega(e.model); })
      .def("save", [](const PyEnsemble& e, const std::string& path) {
        save_checkpoint({e.model, std::nullopt}, path);
      }, py::arg("path"))
      .def_static("load", [](const std::string& path) {
        return PyEnsemble{load_checkpoint(path).model};
      }, py::arg("path"));

  m.def("compare_strategies",
        [](const Array& x, const IntArray& y, const std::string& layers,
           std::vector<std::string> strategies, std::size_t n_seeds, std::size_t members,
           double lr, std::size_t epochs, double seed_fraction, std::vector<double> fractions,
           double val_fraction, std::uint64_t split_seed, std::uint64_t seed, unsigned threads) {
          Dataset data = split(dataset_from(x, y), val_fraction, split_seed);
          ExperimentConfig cfg;
          std::string text = layers;
          if (!text.empty()) text += ',';
          text += "dense:" + std::to_string(data.n_classes) + ",softmax";
          cfg.arch = parse_architecture(text, data.sample_shape());
          cfg.ensemble_size = members;
          cfg.train.lr = lr;
          cfg.train.epochs = epochs;
          cfg.schedule = {seed_fraction, fractions};
          cfg.schedule.validate();
          cfg.threads = threads;
          std::vector<Strategy> parsed;
          for (const auto& s : strategies) parsed.push_back(parse_strategy(s));
          Comparison cmp;
          {
            py::gil_scoped_release release;
            cmp = compare_strategies(data, cfg, parsed, n_seeds, seed);
          }
          py::list rows;
          for (const SummaryRow& r : cmp.summary) {
            py::dict d;
            d["strategy"] = std::string(to_string(r.strategy));
            d["round"] = r.round;
            d["labeled_fraction"] = r.labeled_fraction;
            d["labeled_count"] = r.labeled_count;
            d["mean_accuracy"] = r.mean_accuracy;
            d["std_accuracy"] = r.std_accuracy;
            d["upper_bound"] = r.upper_bound;
            d["relative"] = r.relative;
            rows.append(d);
          }
          return rows;
        },
        py::arg("x"), py::arg("y"), py::arg("layers") = "dense:32,relu,dense:32,relu",
        py::arg("strategies") = std::vector<std::string>{"random", "ensemble", "dpe"},
        py::arg("n_seeds") = 3, py::arg("members") = 8, py::arg("lr") = 0.02,
        py::arg("epochs") = 60, py::arg("seed_fraction") = 0.04,
        py::arg("fractions") = std::vector<double>{0.08, 0.16, 0.32},
        py::arg("val_fraction") = 1.0 / 3.0, py::arg("split_seed") = 0, py::arg("seed") = 0,
        py::arg("threads") = 1,
        "Active-learning comparison; one summary dict per (strategy, round)");
}
