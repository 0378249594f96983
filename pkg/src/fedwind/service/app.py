"""HTTP front end: experiments run as background jobs, searches run inline."""

from __future__ import annotations

import logging
import threading
import uuid

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse

from .. import __version__
from ..errors import FedWindError
from ..experiment import CASE_DEFAULTS, ReportTable, random_model_search, report_csv, run_experiment, search_dataset
from .schemas import (
    ArchitectureInfo,
    ExperimentRequest,
    ExperimentResult,
    HealthResponse,
    JobStatus,
    ReportRowOut,
    SearchRequest,
    SearchResponse,
)

logger = logging.getLogger(__name__)


class JobStore:
    def __init__(self):
        self._lock = threading.Lock()
        self._jobs: dict[str, dict] = {}

    def create(self) -> str:
        job_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._jobs[job_id] = {"status": "queued", "table": None, "error": None}
        return job_id

    def update(self, job_id: str, **fields) -> None:
        with self._lock:
            self._jobs[job_id].update(fields)

    def get(self, job_id: str) -> dict:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise HTTPException(404, f"no job {job_id}")
            return dict(job)


def _summary(table: ReportTable) -> dict[str, dict[str, float]]:
    return {s: {"mean_rmse": table.mean("rmse", s), "sd_rmse": table.sd("rmse", s),
                "mean_seconds": table.mean("seconds", s)} for s in table.strategies}


def _result(table: ReportTable) -> ExperimentResult:
    rows = [ReportRowOut(client=r.client, kind=r.kind, rmse=r.rmse, seconds=r.seconds, val_rmse=r.val_rmse)
            for r in table.rows]
    return ExperimentResult(strategies=table.strategies, rows=rows, csv=report_csv(table))


def create_app() -> FastAPI:
    app = FastAPI(title="fedwind", version=__version__)
    jobs = JobStore()

    def work(job_id: str, request: ExperimentRequest) -> None:
        jobs.update(job_id, status="running")
        try:
            table = run_experiment(request.config)
        except Exception as exc:  # noqa: BLE001 - surfaced through the job status
            logger.exception("job %s failed", job_id)
            jobs.update(job_id, status="failed", error=f"{type(exc).__name__}: {exc}")
            return
        jobs.update(job_id, status="done", table=table)

    def status(job_id: str) -> JobStatus:
        job = jobs.get(job_id)
        summary = _summary(job["table"]) if job["table"] is not None else None
        return JobStatus(id=job_id, status=job["status"], error=job["error"], summary=summary)

    def finished(job_id: str) -> ReportTable:
        job = jobs.get(job_id)
        if job["status"] == "failed":
            raise HTTPException(422, job["error"])
        if job["status"] != "done":
            raise HTTPException(409, f"job {job_id} is {job['status']}")
        return job["table"]

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.get("/architectures", response_model=list[ArchitectureInfo])
    def architectures():
        return [
            ArchitectureInfo(case=case, input_dim=arch.input_dim, hidden=list(arch.hidden),
                             output_activation=arch.output_activation, n_params=arch.n_params,
                             learning_rate=lr)
            for case, (arch, lr, _) in CASE_DEFAULTS.items()
        ]

    @app.post("/experiments", response_model=JobStatus, status_code=202)
    def submit(request: ExperimentRequest):
        job_id = jobs.create()
        if request.wait:
            work(job_id, request)
        else:
            threading.Thread(target=work, args=(job_id, request), daemon=True).start()
        return status(job_id)

    @app.get("/experiments/{job_id}", response_model=JobStatus)
    def get_job(job_id: str):
        return status(job_id)

    @app.get("/experiments/{job_id}/result", response_model=ExperimentResult)
    def get_result(job_id: str):
        return _result(finished(job_id))

    @app.get("/experiments/{job_id}/report.csv", response_class=PlainTextResponse)
    def get_report(job_id: str):
        return PlainTextResponse(report_csv(finished(job_id)), media_type="text/csv")

    @app.post("/search", response_model=SearchResponse)
    def search(request: SearchRequest):
        try:
            data = search_dataset(request.case, request.seed, request.csv_path, request.fleet)
            result = random_model_search(data, request.case, request.trials, request.seed,
                                         request.max_epochs, request.patience)
        except FedWindError as exc:
            raise HTTPException(422, str(exc)) from exc
        return SearchResponse(**result.to_dict())

    return app


app = create_app()
