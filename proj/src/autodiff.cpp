#include "qg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qg/error.hpp"

namespace qg {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw ShapeError("operands recorded on different tapes");
  return *a.tape();
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::truncate(std::size_t size) {
  if (size >= nodes_.size()) return;
  nodes_.resize(size);
  std::erase_if(param_nodes_, [size](const auto& entry) { return entry.second >= size; });
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
    return Var(this, it->second);
  }
  Node node;
  node.value = p.value;
  node.parameter = &p;
  node.needs_grad = recording_;
  nodes_.push_back(std::move(node));
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(Tensor value, std::vector<std::size_t> inputs, Adjoint adjoint) {
  Node node;
  node.value = std::move(value);
  if (recording_) {
    node.needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [&](std::size_t i) { return nodes_[i].needs_grad; });
    if (node.needs_grad) {
      node.inputs = std::move(inputs);
      node.adjoint = std::move(adjoint);
    }
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::add_grad(std::size_t id, Tensor&& g) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    require_same(n.value, g, "add_grad");
    n.grad = std::move(g);
  } else {
    kernels::accumulate(n.grad, g);
  }
}

void Tape::add_grad(std::size_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    require_same(n.value, g, "add_grad");
    n.grad = g;
  } else {
    kernels::accumulate(n.grad, g);
  }
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ShapeError("backward: loss recorded on another tape");
  if (loss.value().numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_string(loss.value().shape()));
  }
  if (!recording_) throw ShapeError("backward: tape was created without gradient recording");

  for (auto& [param, id] : param_nodes_) {
    param->zero_grad();
    nodes_[id].grad = Tensor();
  }
  for (std::size_t i = loss.id() + 1; i-- > 0;) nodes_[i].grad = Tensor();
  grad(loss.id()).fill(1.0);

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.needs_grad) continue;
    if (n.adjoint) n.adjoint(*this, i);
    if (n.parameter != nullptr) kernels::accumulate(n.parameter->grad, n.grad);
  }
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.push(kernels::matmul(a.value(), b.value()), {a.id(), b.id()},
                [a = a.id(), b = b.id()](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  if (t.needs_grad(a)) t.add_grad(a, kernels::matmul_nt(g, t.value(b)));
                  if (t.needs_grad(b)) t.add_grad(b, kernels::matmul_tn(t.value(a), g));
                });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.push(kernels::matmul_nt(a.value(), b.value()), {a.id(), b.id()},
                [a = a.id(), b = b.id()](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  if (t.needs_grad(a)) t.add_grad(a, kernels::matmul(g, t.value(b)));
                  if (t.needs_grad(b)) t.add_grad(b, kernels::matmul_tn(g, t.value(a)));
                });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  kernels::accumulate(out, b.value());
  return t.push(std::move(out), {a.id(), b.id()}, [a = a.id(), b = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(a)) t.add_grad(a, g);
    if (t.needs_grad(b)) t.add_grad(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return t.push(std::move(out), {a.id(), b.id()}, [a = a.id(), b = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(a)) t.add_grad(a, g);
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return t.push(std::move(out), {a.id(), b.id()}, [a = a.id(), b = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad(a);
      const Tensor& vb = t.value(b);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      const Tensor& va = t.value(a);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return a.tape()->push(std::move(out), {a.id()}, [a = a.id(), factor](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * factor;
  });
}

Var add_row(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  const std::size_t n = x.cols();
  if (bias.value().numel() != n) {
    throw ShapeError("add_row: bias " + shape_string(bias.shape()) + " does not match columns of " +
                     shape_string(x.shape()));
  }
  Tensor out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) += bias.value()[c];
  }
  return t.push(std::move(out), {x.id(), bias.id()},
                [x = x.id(), b = bias.id(), n](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  if (t.needs_grad(x)) t.add_grad(x, g);
                  if (t.needs_grad(b)) {
                    Tensor& gb = t.grad(b);
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                      for (std::size_t c = 0; c < n; ++c) gb[c] += g.at(r, c);
                    }
                  }
                });
}

Var add_constant(Var x, const Tensor& c) {
  require_same(x.value(), c, "add_constant");
  Tensor out = x.value();
  kernels::accumulate(out, c);
  return x.tape()->push(std::move(out), {x.id()}, [x = x.id()](Tape& t, std::size_t self) {
    t.add_grad(x, t.grad(self));
  });
}

Var mul_constant(Var x, const Tensor& c) {
  require_same(x.value(), c, "mul_constant");
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
  return x.tape()->push(std::move(out), {x.id()}, [x = x.id(), c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * c[i];
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return x.tape()->push(std::move(out), {x.id()}, [x = x.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& in = t.value(x);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (in[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var softmax_rows(Var x) {
  Tensor out = kernels::softmax_rows(x.value());
  return x.tape()->push(std::move(out), {x.id()}, [x = x.id()](Tape& t, std::size_t self) {
    // dx = y ⊙ (g - rowsum(g ⊙ y))
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(x);
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g.at(r, c) * y.at(r, c);
      for (std::size_t c = 0; c < n; ++c) gx.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = tape_of(x, gain);
  tape_of(x, bias);
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  if (gain.value().numel() != n || bias.value().numel() != n) {
    throw ShapeError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                     shape_string(bias.shape()) + " do not match " + shape_string(x.shape()));
  }
  // Normalized activations and inverse std are kept for the adjoint.
  Tensor xhat(x.shape());
  std::vector<double> inv_std(m);
  Tensor out(x.shape());
  const Tensor& in = x.value();
  for (std::size_t r = 0; r < m; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += in.at(r, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double d = in.at(r, c) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat.at(r, c) = (in.at(r, c) - mean) * inv_std[r];
      out.at(r, c) = xhat.at(r, c) * gain.value()[c] + bias.value()[c];
    }
  }
  return t.push(std::move(out), {x.id(), gain.id(), bias.id()},
                [x = x.id(), gn = gain.id(), b = bias.id(), xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& gamma = t.value(gn);
                  const std::size_t m = g.rows();
                  const std::size_t n = g.cols();
                  if (t.needs_grad(gn) || t.needs_grad(b)) {
                    Tensor& gg = t.grad(gn);
                    Tensor& gb = t.grad(b);
                    for (std::size_t r = 0; r < m; ++r) {
                      for (std::size_t c = 0; c < n; ++c) {
                        gg[c] += g.at(r, c) * xhat.at(r, c);
                        gb[c] += g.at(r, c);
                      }
                    }
                  }
                  if (!t.needs_grad(x)) return;
                  Tensor& gx = t.grad(x);
                  const double inv_n = 1.0 / static_cast<double>(n);
                  for (std::size_t r = 0; r < m; ++r) {
                    double sum_dy = 0.0;
                    double sum_dy_xhat = 0.0;
                    for (std::size_t c = 0; c < n; ++c) {
                      const double dy = g.at(r, c) * gamma[c];
                      sum_dy += dy;
                      sum_dy_xhat += dy * xhat.at(r, c);
                    }
                    for (std::size_t c = 0; c < n; ++c) {
                      const double dy = g.at(r, c) * gamma[c];
                      gx.at(r, c) += inv_std[r] *
                                     (dy - inv_n * sum_dy - xhat.at(r, c) * inv_n * sum_dy_xhat);
                    }
                  }
                });
}

Var embedding(Var table, const std::vector<std::int32_t>& ids) {
  const Tensor& tab = table.value();
  const std::size_t vocab = tab.rows();
  const std::size_t d = tab.cols();
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(tab.data().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data().data() + i * d);
  }
  return table.tape()->push(std::move(out), {table.id()},
                            [tb = table.id(), ids, d](Tape& t, std::size_t self) {
                              const Tensor& g = t.grad(self);
                              Tensor& gt = t.grad(tb);
                              for (std::size_t i = 0; i < ids.size(); ++i) {
                                double* row = gt.data().data() + static_cast<std::size_t>(ids[i]) * d;
                                for (std::size_t c = 0; c < d; ++c) row[c] += g.at(i, c);
                              }
                            });
}

Var cross_entropy(Var logits, const std::vector<std::int32_t>& targets, std::int32_t ignore_id, double smoothing) {
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw InputError("cross_entropy: smoothing must lie in [0, 1)");
  const Tensor& z = logits.value();
  const std::size_t m = z.rows();
  const std::size_t v = z.cols();
  if (targets.size() != m) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(z.shape()));
  }
  Tensor probs = kernels::softmax_rows(z);
  std::size_t counted = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] == ignore_id) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw InputError("cross_entropy: target id " + std::to_string(targets[r]) + " outside " +
                       std::to_string(v) + " classes");
    }
    double mx = z.at(r, 0);
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, z.at(r, c));
    double s = 0.0, mean = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      s += std::exp(z.at(r, c) - mx);
      mean += z.at(r, c);
    }
    const double lse = mx + std::log(s);
    total += (1.0 - smoothing) * (lse - z.at(r, static_cast<std::size_t>(targets[r])));
    if (smoothing > 0.0) total += smoothing * (lse - mean / static_cast<double>(v));
    ++counted;
  }
  if (counted == 0) throw InputError("cross_entropy: every target position is padding");
  const double inv = 1.0 / static_cast<double>(counted);
  return logits.tape()->push(
      Tensor::scalar(total * inv), {logits.id()},
      [lg = logits.id(), targets, ignore_id, probs = std::move(probs), inv, smoothing](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0] * inv;
        Tensor& gz = t.grad(lg);
        const std::size_t v = probs.cols();
        const double spread = g * smoothing / static_cast<double>(v);
        for (std::size_t r = 0; r < probs.rows(); ++r) {
          if (targets[r] == ignore_id) continue;
          for (std::size_t c = 0; c < v; ++c) gz.at(r, c) += g * probs.at(r, c) - spread;
          gz.at(r, static_cast<std::size_t>(targets[r])) -= g * (1.0 - smoothing);
        }
      });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = *parts.front().tape();
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    tape_of(parts.front(), p);
    if (p.rows() != m) {
      throw ShapeError("concat_cols: row count mismatch " + shape_string(parts.front().shape()) +
                       " vs " + shape_string(p.shape()));
    }
    total += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < m; ++r) {
      std::copy_n(v.data().data() + r * v.cols(), v.cols(), out.data().data() + r * total + off);
    }
    off += v.cols();
  }
  return t.push(std::move(out), ids, [ids, widths, total](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs_grad(ids[k])) {
        Tensor& gp = t.grad(ids[k]);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < widths[k]; ++c) gp.at(r, c) += g[r * total + off + c];
        }
      }
      off += widths[k];
    }
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t width) {
  const Tensor& v = x.value();
  if (width == 0 || start + width > v.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + width) +
                     ") outside " + shape_string(v.shape()));
  }
  Tensor out({v.rows(), width});
  for (std::size_t r = 0; r < v.rows(); ++r) {
    std::copy_n(v.data().data() + r * v.cols() + start, width, out.data().data() + r * width);
  }
  return x.tape()->push(std::move(out), {x.id()}, [x = x.id(), start, width](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < width; ++c) gx.at(r, start + c) += g.at(r, c);
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = *parts.front().tape();
  const std::size_t n = parts.front().cols();
  std::vector<double> data;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> counts;
  for (const Var& p : parts) {
    tape_of(parts.front(), p);
    if (p.cols() != n) {
      throw ShapeError("concat_rows: column count mismatch " + shape_string(parts.front().shape()) +
                       " vs " + shape_string(p.shape()));
    }
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    ids.push_back(p.id());
    counts.push_back(p.value().numel());
  }
  const std::size_t m = data.size() / n;
  return t.push(Tensor({m, n}, std::move(data)), ids, [ids, counts](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs_grad(ids[k])) {
        Tensor& gp = t.grad(ids[k]);
        for (std::size_t i = 0; i < counts[k]; ++i) gp[i] += g[off + i];
      }
      off += counts[k];
    }
  });
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
  const Tensor& v = x.value();
  if (count == 0 || start + count > v.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_string(v.shape()));
  }
  const std::size_t n = v.cols();
  std::vector<double> data(v.data().begin() + static_cast<std::ptrdiff_t>(start * n),
                           v.data().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  return x.tape()->push(Tensor({count, n}, std::move(data)), {x.id()},
                        [x = x.id(), off = start * n](Tape& t, std::size_t self) {
                          const Tensor& g = t.grad(self);
                          Tensor& gx = t.grad(x);
                          for (std::size_t i = 0; i < g.numel(); ++i) gx[off + i] += g[i];
                        });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape()->push(Tensor::scalar(s), {x.id()}, [x = x.id()](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(x).data()) v += g;
  });
}

Var sum_squares(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  return x.tape()->push(Tensor::scalar(s), {x.id()}, [x = x.id()](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Tensor& in = t.value(x);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < in.numel(); ++i) gx[i] += 2.0 * g * in[i];
  });
}

double check_gradients(const std::function<Var(Tape&)>& loss_fn, Parameter& p, double step) {
  if (!(step > 0.0) || !std::isfinite(step)) {
    throw InputError("check_gradients: step must be positive, got " + std::to_string(step));
  }
  auto evaluate = [&]() {
    Tape tape(false);
    return loss_fn(tape).value().item();
  };
  const double first = evaluate();
  const double second = evaluate();
  if (first != second) {
    throw InputError("check_gradients: loss function is not deterministic");
  }

  Tensor analytic;
  {
    Tape tape(true);
    Var loss = loss_fn(tape);
    tape.backward(loss);
    analytic = p.grad;
  }

  double diff2 = 0.0, analytic2 = 0.0, numeric2 = 0.0;
  for (std::size_t i = 0; i < p.value.numel(); ++i) {
    const double saved = p.value[i];
    p.value[i] = saved + step;
    const double up = evaluate();
    p.value[i] = saved - step;
    const double down = evaluate();
    p.value[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
    analytic2 += analytic[i] * analytic[i];
    numeric2 += numeric * numeric;
  }
  const double denom = std::max({std::sqrt(analytic2), std::sqrt(numeric2), 1e-12});
  return std::sqrt(diff2) / denom;
}

}  // namespace qg
