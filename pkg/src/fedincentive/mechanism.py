"""Verification against the server's private validation set, payments, and the client ledger.

A client that submits pays its participation cost every round; it is paid the
fixed reward only when its update's mean validation loss is strictly below the
threshold. The analyzers below give the closed-form expected utilities of the
honest and poisoned actions so they can be checked against a simulated ledger.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .adversary import ClientType
from .datasets import Dataset
from .model import ModelParams, evaluate


@dataclass(frozen=True)
class MechanismParams:
    reward: float = 10.0
    cost: float = 2.0
    threshold: float = 2.5
    allow_unprofitable: bool = False

    def __post_init__(self) -> None:
        if not self.reward > 0:
            raise ValueError(f"reward must be > 0, got {self.reward}")
        if self.cost < 0:
            raise ValueError(f"cost must be >= 0, got {self.cost}")
        if math.isnan(self.threshold):
            raise ValueError("threshold must not be NaN")
        if not self.reward > self.cost and not self.allow_unprofitable:
            raise ValueError(
                f"reward ({self.reward}) must exceed cost ({self.cost}); "
                "set allow_unprofitable to run anyway"
            )


class VerificationOutcome(NamedTuple):
    client_id: int
    validation_loss: float
    verified: bool
    payment: float


def decide_payment(client_id: int, validation_loss: float, params: MechanismParams) -> VerificationOutcome:
    """Pay the full reward iff ``validation_loss < threshold``; NaN counts as +inf."""
    loss = float(validation_loss)
    if math.isnan(loss):
        loss = math.inf
    verified = loss < params.threshold
    return VerificationOutcome(client_id, loss, verified, params.reward if verified else 0.0)


def verify_and_pay(
    update: ModelParams, validation: Dataset, params: MechanismParams, client_id: int
) -> VerificationOutcome:
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    # a diverged update may overflow; its loss becomes inf or nan and is rejected
    with np.errstate(over="ignore", invalid="ignore"):
        loss = evaluate(update, validation).mean_loss
    return decide_payment(client_id, loss, params)


def round_utility(outcome: VerificationOutcome, cost: float) -> float:
    if cost < 0:
        raise ValueError(f"cost must be >= 0, got {cost}")
    return outcome.payment - cost


# ---------------------------------------------------------------- analysis


def ir_holds(params: MechanismParams, p_verify_honest: float) -> tuple[bool, float]:
    """Participation is rational iff reward > cost / P(verified | honest).

    Returns ``(holds, min_reward)``; a zero pass probability gives ``(False, inf)``.
    """
    if not 0.0 <= p_verify_honest <= 1.0:
        raise ValueError(f"probability must be in [0, 1], got {p_verify_honest}")
    if p_verify_honest == 0.0:
        return False, math.inf
    min_reward = params.cost / p_verify_honest
    return params.reward > min_reward, min_reward


def expected_utilities(
    params: MechanismParams, p_verify_honest: float, p_verify_malicious: float
) -> tuple[float, float, bool]:
    """Expected per-round utility of the honest and the poisoned action.

    Poisoning counts as dominated when its expected utility is strictly below
    the zero payoff of not participating.
    """
    for p in (p_verify_honest, p_verify_malicious):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {p}")
    e_honest = p_verify_honest * params.reward - params.cost
    e_malicious = p_verify_malicious * params.reward - params.cost
    return e_honest, e_malicious, e_malicious < 0


# ---------------------------------------------------------------- ledger


class LedgerRow(NamedTuple):
    round: int
    client_id: int
    true_type: ClientType
    validation_loss: float
    verified: bool
    payment: float
    cumulative_utility: float


class RoundCounts(NamedTuple):
    round: int
    honest_submitted: int
    honest_verified: int
    malicious_submitted: int
    malicious_verified: int

    @property
    def verified(self) -> int:
        return self.honest_verified + self.malicious_verified


@dataclass(frozen=True)
class Ledger:
    """Cumulative money flows of a run.

    ``server_expenditure`` is the total paid out (reported as "revenue" in some
    write-ups). Client costs are debited to clients and never reach the server.
    ``reward`` is the per-verification payment the ledger was opened with.
    """

    reward: float = 0.0
    types: Mapping[int, ClientType] = field(default_factory=dict)
    payments: Mapping[int, float] = field(default_factory=dict)
    costs: Mapping[int, float] = field(default_factory=dict)
    submissions: Mapping[int, int] = field(default_factory=dict)
    verifications: Mapping[int, int] = field(default_factory=dict)
    server_expenditure: float = 0.0
    n_verified_total: int = 0
    rounds: tuple[RoundCounts, ...] = ()
    rows: tuple[LedgerRow, ...] = ()

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    def utility(self, client_id: int) -> float:
        return self.payments.get(client_id, 0.0) - self.costs.get(client_id, 0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LEDGER_HEADER)
        for r in self.rows:
            w.writerow(
                [
                    r.round,
                    r.client_id,
                    r.true_type.value,
                    format_number(r.validation_loss),
                    int(r.verified),
                    format_number(r.payment),
                    format_number(r.cumulative_utility),
                ]
            )
        return buf.getvalue()


LEDGER_HEADER = (
    "round",
    "client_id",
    "true_type",
    "validation_loss",
    "verified",
    "payment",
    "cumulative_utility",
)


def format_number(x: float) -> str:
    """17 significant digits, enough to round-trip a float64 exactly."""
    return format(float(x), ".17g")


def ledger_append(
    ledger: Ledger,
    outcomes: Sequence[VerificationOutcome],
    types: Mapping[int, ClientType] | Sequence[ClientType],
    cost: float,
) -> Ledger:
    """Fold one round of outcomes into a new ledger; ``ledger`` is left untouched.

    ``types`` is looked up by client id (a list indexed by id works). Outcomes
    are recorded in ascending client-id order.
    """
    if cost < 0:
        raise ValueError(f"cost must be >= 0, got {cost}")
    lookup = dict(types) if isinstance(types, Mapping) else dict(enumerate(types))
    ids = [o.client_id for o in outcomes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client id in one round of outcomes")
    known = dict(ledger.types)
    for cid in ids:
        if cid not in lookup:
            raise ValueError(f"no client type given for client id {cid}")
        if cid in known and known[cid] != lookup[cid]:
            raise ValueError(f"client {cid} changed type from {known[cid].value} to {lookup[cid].value}")
        known[cid] = lookup[cid]

    payments, costs = dict(ledger.payments), dict(ledger.costs)
    subs, vers = dict(ledger.submissions), dict(ledger.verifications)
    t = ledger.n_rounds
    rows = []
    counts = {ClientType.BENEVOLENT: [0, 0], ClientType.MALICIOUS: [0, 0]}
    expenditure, n_verified = ledger.server_expenditure, ledger.n_verified_total
    for o in sorted(outcomes, key=lambda o: o.client_id):
        cid, kind = o.client_id, known[o.client_id]
        payments[cid] = payments.get(cid, 0.0) + o.payment
        costs[cid] = costs.get(cid, 0.0) + cost
        subs[cid] = subs.get(cid, 0) + 1
        vers[cid] = vers.get(cid, 0) + int(o.verified)
        counts[kind][0] += 1
        if o.verified:
            counts[kind][1] += 1
            n_verified += 1
        expenditure += o.payment
        rows.append(
            LedgerRow(t, cid, kind, o.validation_loss, o.verified, o.payment, payments[cid] - costs[cid])
        )
    h, m = counts[ClientType.BENEVOLENT], counts[ClientType.MALICIOUS]
    return Ledger(
        reward=ledger.reward,
        types=known,
        payments=payments,
        costs=costs,
        submissions=subs,
        verifications=vers,
        server_expenditure=expenditure,
        n_verified_total=n_verified,
        rounds=ledger.rounds + (RoundCounts(t, h[0], h[1], m[0], m[1]),),
        rows=ledger.rows + tuple(rows),
    )


def pass_rates_from_counts(rounds: Iterable[RoundCounts]) -> tuple[float | None, float | None]:
    hs = hv = ms = mv = 0
    for r in rounds:
        hs += r.honest_submitted
        hv += r.honest_verified
        ms += r.malicious_submitted
        mv += r.malicious_verified
    return (hv / hs if hs else None), (mv / ms if ms else None)


def empirical_pass_rates(ledger: Ledger, from_round: int = 0) -> tuple[float | None, float | None]:
    """Verified / submitted, per true client type; ``None`` where a type never submitted.

    ``from_round`` restricts the estimate to rounds ``>= from_round``.
    """
    if ledger.n_rounds == 0:
        raise ValueError("ledger covers no rounds")
    return pass_rates_from_counts(r for r in ledger.rounds if r.round >= from_round)


def mean_utility_by_type(ledger: Ledger, kind: ClientType) -> float | None:
    """Realized utility per submission, pooled over every client of ``kind``."""
    ids = [cid for cid, t in ledger.types.items() if t == kind]
    n = sum(ledger.submissions[cid] for cid in ids)
    if n == 0:
        return None
    return sum(ledger.utility(cid) for cid in ids) / n
