# models.py
from sqlalchemy import Column, DateTime, ForeignKey, Index, Integer, LargeBinary, String
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func

from database import Base

# bump when the samples blob layout changes
STORE_FORMAT_VERSION = 1


class DatasetRecord(Base):
    __tablename__ = "datasets"

    id = Column(Integer, primary_key=True, index=True)
    format_version = Column(Integer, nullable=False, default=STORE_FORMAT_VERSION)
    seed = Column(Integer, nullable=False)
    granularity = Column(String, nullable=False)
    channels = Column(String, nullable=False)
    representation = Column(String, nullable=False)
    created_at = Column(DateTime(timezone=True), nullable=False,
                        server_default=func.now(), index=True)

    samples = relationship("SampleRecord", back_populates="dataset",
                           order_by="SampleRecord.position", cascade="all, delete-orphan")


class SampleRecord(Base):
    __tablename__ = "samples"

    id = Column(Integer, primary_key=True, index=True)
    dataset_id = Column(Integer, ForeignKey("datasets.id"), nullable=False, index=True)
    position = Column(Integer, nullable=False)
    asset_id = Column(String, nullable=False, index=True)
    period_id = Column(Integer, nullable=False)
    label = Column(Integer, nullable=False)
    split = Column(String, nullable=False)
    length = Column(Integer, nullable=False)
    channels = Column(Integer, nullable=False)
    # little-endian float32, row-major [length x channels]
    values = Column(LargeBinary, nullable=False)

    dataset = relationship("DatasetRecord", back_populates="samples")


Index("idx_samples_dataset_split", SampleRecord.dataset_id, SampleRecord.split)
Index("idx_samples_dataset_position", SampleRecord.dataset_id, SampleRecord.position, unique=True)
