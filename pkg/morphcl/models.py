from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, UniqueConstraint, func
from sqlalchemy.orm import relationship

from morphcl.database import Base


class RunRecord(Base):
    __tablename__ = "runs"
    __table_args__ = (UniqueConstraint("experiment", "condition", "seed", name="uq_run_key"),)

    id = Column(Integer, primary_key=True, index=True)
    experiment = Column(String(32), nullable=False, index=True)
    condition = Column(String(4), nullable=False)
    seed = Column(Integer, nullable=False)

    status = Column(String(10), default="ok", nullable=False)  # ok / failed
    avg = Column(Float, nullable=True)
    bwt = Column(Float, nullable=True)
    fwt = Column(Float, nullable=True)
    forgetting = Column(Float, nullable=True)
    final_hamiltonian = Column(Float, nullable=True)
    final_arch = Column(String(255), nullable=True)

    log_path = Column(String, nullable=True)
    summary_path = Column(String, nullable=True)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime(timezone=True), server_default=func.now(), nullable=False)

    morphs = relationship("MorphEventRecord", back_populates="run", cascade="all, delete-orphan")


class MorphEventRecord(Base):
    __tablename__ = "morph_events"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    run = relationship("RunRecord", back_populates="morphs")

    task = Column(Integer, nullable=False)
    mode = Column(String(8), nullable=False)  # awb / reinit / kept
    arch_old = Column(String(255), nullable=False)
    arch_new = Column(String(255), nullable=False)
    pre_loss = Column(Float, nullable=False)
    post_loss = Column(Float, nullable=False)
    n_ab = Column(Integer, default=0, nullable=False)
    transfer_norm = Column(Float, nullable=True)
