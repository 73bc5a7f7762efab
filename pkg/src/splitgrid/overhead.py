"""Closed-form communication, multiplication-count, latency and energy accounting.

All counts are evaluated with ``fractions.Fraction`` so the shares are exact
before they are rounded for display.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from fractions import Fraction as F

PAPER_ELEMENT_MULTIPLIER = 8
COMM_MODES = ("shape-exact", "appendix-shapes", "paper-arithmetic")


@dataclass(frozen=True)
class OverheadParams:
    C: int = 10
    B: int = 1
    N: int = 128
    D: int = 512
    D_ff: int = 2048
    M: int = 64
    L_e: int = 96
    L_d: int = 144
    O: int = 96
    Z: int = 1
    U: int = 4
    heads: int = 1
    conv_width: int = 3
    bytes_per_element: int = 4
    backward_factor: float = 2.5


@dataclass
class CommReport:
    mode: str
    client_to_gs: int
    gs_to_sp: int
    sp_to_gs: int
    sp_to_client_predictions: int
    client_to_sp_loss_grads: int
    weight_transfer: int
    paper_total: int
    client_share: float

    def parts(self) -> dict[str, int]:
        return {
            "client_to_gs": self.client_to_gs,
            "gs_to_sp": self.gs_to_sp,
            "sp_to_gs": self.sp_to_gs,
            "sp_to_client_predictions": self.sp_to_client_predictions,
            "client_to_sp_loss_grads": self.client_to_sp_loss_grads,
        }

    @property
    def total(self) -> int:
        return sum(self.parts().values())


@dataclass
class OverheadReport:
    params: OverheadParams
    comm: dict[str, CommReport]
    ops_client: int
    ops_sp: int
    client_forward_share: float
    client_round_share: float
    latency: dict[str, float] = field(default_factory=dict)
    energy: dict[str, float] = field(default_factory=dict)


def split1_param_count(p: OverheadParams) -> int:
    e = p.D // p.heads
    feb = p.D * p.D + 2 * p.heads * e * e * p.M
    return p.conv_width * p.Z * p.D + 2 * p.U * p.D + 2 * feb + p.D * p.Z


def comm_report(p: OverheadParams, mode: str = "shape-exact") -> CommReport:
    """Bytes on each link for one model-update round.

    ``shape-exact`` counts the tensors actually shipped (Z-wide trend).
    ``appendix-shapes`` counts three activation tensors with a D-wide trend.
    ``paper-arithmetic`` is ``appendix-shapes`` times the element multiplier
    that reproduces the published per-client payload.
    """
    bpe = p.bytes_per_element
    if mode == "shape-exact":
        per_client = p.B * (p.L_e * p.D + p.L_d * p.D + p.L_d * p.Z) * bpe
        small = p.B * p.O * p.Z * bpe
    elif mode in ("appendix-shapes", "paper-arithmetic"):
        mult = PAPER_ELEMENT_MULTIPLIER if mode == "paper-arithmetic" else 1
        per_client = p.B * (p.L_e + 2 * p.L_d) * p.D * bpe * mult
        small = p.B * p.O * p.Z * bpe * mult
    else:
        raise ValueError(f"unknown accounting mode {mode!r}")
    gs_to_sp = p.C * per_client
    paper_total = per_client + 2 * gs_to_sp
    if mode != "shape-exact":
        # both directions of each activation-sized link, client uplink as the client's part
        share = F(per_client, 2 * per_client + 2 * gs_to_sp) if per_client else F(0)
    else:
        share = F(per_client + small, paper_total + 2 * small) if paper_total else F(0)
    return CommReport(
        mode=mode,
        client_to_gs=per_client,
        gs_to_sp=gs_to_sp,
        sp_to_gs=gs_to_sp,
        sp_to_client_predictions=small,
        client_to_sp_loss_grads=small,
        weight_transfer=split1_param_count(p) * bpe * p.C,
        paper_total=paper_total,
        client_share=float(share),
    )


def _ops_client(p: OverheadParams) -> F:
    L, M, D, N = F(p.L_e), F(p.M), F(p.D), F(p.N)
    return (F(5, 2) * L + 2 * M) * D * D + (5 * N + F(3, 2)) * L * D


def _ops_sp(p: OverheadParams) -> F:
    L, M, D, N, Dff = F(p.L_e), F(p.M), F(p.D), F(p.N), F(p.D_ff)
    return (4 * Dff + 7 * N + F(9, 2)) * L * D + (F(9, 2) * L + M) * D * D + 2 * M * M * D + 3 * L * D * Dff


def ops_client(p: OverheadParams) -> float:
    """Split-1 multiplications: two FEB blocks plus the trend projection."""
    return float(_ops_client(p))


def ops_sp(p: OverheadParams) -> float:
    return float(_ops_sp(p))


def module_ops(p: OverheadParams) -> dict[str, float]:
    Le, Ld, M, D, N, Dff = p.L_e, p.L_d, p.M, p.D, p.N, p.D_ff
    return {
        "feb_encoder": (Le + M) * D * D + 2 * N * Le * D,
        "feb_decoder": (Ld + M) * D * D + 2 * N * Ld * D,
        "fea": (2 * Le + Ld) * D * D + 2 * (Le + Ld) * N * D + 2 * M * M * D,
        "ffn_encoder": 2 * Le * D * Dff,
        "ffn_decoder": 2 * Ld * D * Dff,
    }


def latency_estimate(client_share: float, gs_speedup: float, gs_time_budget: float) -> dict[str, float]:
    """Round latency when the provider finishes its share in ``gs_time_budget`` seconds."""
    if gs_speedup <= 0:
        raise ValueError("gs_speedup must be positive")
    provider_share = 1.0 - client_share
    full_round = gs_time_budget / provider_share
    client_time = full_round * client_share * gs_speedup
    total = gs_time_budget + client_time
    return {
        "provider_seconds": gs_time_budget,
        "full_round_at_provider_speed": full_round,
        "client_seconds": client_time,
        "total_seconds": total,
        "client_latency_share": client_time / total,
    }


def shares_and_latency(
    p: OverheadParams,
    gs_speedup: float = 5.0,
    gs_time_budget: float = 10.0,
    assumed_client_share: float | None = 0.05,
) -> OverheadReport:
    """Assemble the full report.

    The round share divides the client's forward work by ``backward_factor``
    times the whole forward pass.  Latency uses ``assumed_client_share`` (the
    rounded 5 % workload assumption) unless it is None, in which case the
    computed round share is used.
    """
    oc, osp = _ops_client(p), _ops_sp(p)
    total = oc + osp
    forward_share = oc / total if total else F(0)
    round_share = oc / (F(p.backward_factor) * total) if total else F(0)
    share_for_latency = float(round_share) if assumed_client_share is None else assumed_client_share
    return OverheadReport(
        params=p,
        comm={m: comm_report(p, m) for m in COMM_MODES},
        ops_client=int(oc) if oc.denominator == 1 else float(oc),
        ops_sp=int(osp) if osp.denominator == 1 else float(osp),
        client_forward_share=float(forward_share),
        client_round_share=float(round_share),
        latency=latency_estimate(share_for_latency, gs_speedup, gs_time_budget),
        energy={"client": float(round_share), "provider": float(1 - round_share)},
    )


def report_rows(r: OverheadReport) -> list[tuple[str, str]]:
    rows: list[tuple[str, str]] = [(f"param.{k}", str(v)) for k, v in asdict(r.params).items()]
    for mode, c in r.comm.items():
        for k, v in c.parts().items():
            rows.append((f"comm.{mode}.{k}_bytes", str(v)))
        rows.append((f"comm.{mode}.round_total_bytes", str(c.paper_total)))
        rows.append((f"comm.{mode}.weight_transfer_bytes", str(c.weight_transfer)))
        rows.append((f"comm.{mode}.client_share_pct", f"{100 * c.client_share:.4f}"))
    rows += [
        ("ops.client", str(r.ops_client)),
        ("ops.sp", str(r.ops_sp)),
        ("share.client_forward_pct", f"{100 * r.client_forward_share:.4f}"),
        ("share.client_round_pct", f"{100 * r.client_round_share:.4f}"),
    ]
    rows += [(f"latency.{k}", f"{v:.6f}") for k, v in r.latency.items()]
    rows += [(f"energy.{k}_pct", f"{100 * v:.4f}") for k, v in r.energy.items()]
    return rows


def report_csv(r: OverheadReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quantity", "value"])
    w.writerows(report_rows(r))
    return buf.getvalue()
